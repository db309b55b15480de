//! Small phantom cohorts and networks shared by the integration tests.

use cardioseg::data::PreprocessConfig;
use cardioseg::phantom::{generate_cohort, Cohort, PerVendor, PhantomConfig};
use cardioseg::ssl::{prepare_cohort, CohortSplits};
use cardioseg::{NetworkConfig, NetworkInstance};

pub fn phantom(seed: u64, patients: (usize, usize, usize), image_size: usize) -> Cohort {
    generate_cohort(&PhantomConfig {
        image_size,
        patients_per_vendor: PerVendor {
            a: patients.0,
            b: patients.1,
            c: patients.2,
        },
        seed,
        ..PhantomConfig::default()
    })
    .unwrap()
}

pub fn splits_of(cohort: &Cohort, image_size: usize, seed: u64) -> CohortSplits {
    let pre = PreprocessConfig {
        crop_height: image_size,
        crop_width: image_size,
        normalize: true,
    };
    prepare_cohort(&cohort.labeled, &cohort.unlabeled, &pre, seed).unwrap()
}

pub fn splits(seed: u64, patients: (usize, usize, usize), image_size: usize) -> CohortSplits {
    splits_of(&phantom(seed, patients, image_size), image_size, seed)
}

/// The default desk cohort: 10+10 labeled, 5 unlabeled, 64 px.
pub fn desk_splits(seed: u64) -> CohortSplits {
    let cohort = generate_cohort(&PhantomConfig {
        seed,
        ..PhantomConfig::default()
    })
    .unwrap();
    splits_of(&cohort, 64, seed)
}

pub fn net(depth: usize, base_filters: usize, residual: bool, seed: u64) -> NetworkInstance {
    NetworkInstance::build(
        NetworkConfig {
            depth,
            base_filters,
            residual,
            ..NetworkConfig::default()
        },
        seed,
    )
    .unwrap()
}
