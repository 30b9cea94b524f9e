//! Fixtures shared by the kernel benchmarks.

use famos_core::config::RunConfig;
use famos_core::generator::Generator;
use famos_core::image_ops::Image;
use famos_core::trainer::{build_bank, build_networks, Memory};
use famos_core::{RngState, Tensor};

/// Striped RGB style image with enough structure for template cropping.
pub fn style(h: usize, w: usize) -> Image {
    Image::from_fn(3, h, w, |c, y, x| (((x * 7 + y * 3 + c * 5) % 17) as f32 / 8.0) - 1.0).expect("non-empty style")
}

/// Everything one generator forward needs at `extent`, from the default run
/// config.
pub struct ForwardFixture {
    pub generator: Generator,
    pub content: Tensor,
    pub coords: Tensor,
    pub templates: Option<Tensor>,
    pub noise: Tensor,
}

pub fn forward_fixture(extent: (usize, usize), seed: u64) -> ForwardFixture {
    let mut cfg = RunConfig::default();
    cfg.set("train.seed", &seed.to_string()).expect("valid seed");
    let (generator, _, _) = build_networks(&cfg).expect("default config builds");
    let bank = build_bank(&cfg, &[style(2 * extent.0, 2 * extent.1)], extent).expect("bank builds");
    let memory = Memory::new(bank, extent);
    let (templates, coords) = memory.crop((0, 0), extent).expect("crop inside the bank");
    let content = Image::from_fn(3, extent.0, extent.1, |_, y, x| ((x + y) as f32 * 0.05).sin())
        .expect("non-empty content")
        .to_tensor();
    let noise = generator.draw_noise(1, &mut RngState::new(seed));
    ForwardFixture {
        generator,
        content,
        coords,
        templates,
        noise,
    }
}
