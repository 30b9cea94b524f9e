//! Pulls `--dotted.key value` overrides out of the argument list before
//! clap sees it.

const ALIASES: &[(&str, &str)] = &[("steps", "train.steps"), ("seed", "train.seed")];

/// Split `args` into the arguments for clap and `(key, value)` overrides.
/// Validity of keys and values is checked when they are applied.
pub fn split(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(arg) = it.next() {
        if arg == "--" {
            rest.push(arg.clone());
            rest.extend(it.cloned());
            break;
        }
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        let key = match ALIASES.iter().find(|(a, _)| *a == name) {
            Some((_, k)) => k.to_string(),
            None if name.contains('.') => name.to_string(),
            None => {
                rest.push(arg.clone());
                continue;
            }
        };
        let value = match inline {
            Some(v) => v,
            None => it.next().cloned().ok_or_else(|| format!("--{name} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}
