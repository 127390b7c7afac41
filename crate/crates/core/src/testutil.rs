use crate::dataset::LabeledDataset;
use crate::detector::{generate_synthetic_dataset, DetectorHandle, SynthConfig};
use crate::nn::{ToyArch, ToyNet};

pub(crate) const TINY: usize = 40;

/// Untrained toy net at a small input size, fast enough for gradient checks.
pub(crate) fn tiny_detector(seed: u64) -> DetectorHandle {
    let arch = ToyArch {
        input_size: TINY,
        channels: [4, 6, 8, 8, 8],
    };
    DetectorHandle::toy(ToyNet::new(arch, seed))
}

pub(crate) fn tiny_dataset(n: usize, seed: u64) -> LabeledDataset {
    let cfg = SynthConfig {
        size: TINY,
        ..SynthConfig::default()
    };
    generate_synthetic_dataset(n, seed, &cfg)
}
