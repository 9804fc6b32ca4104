use convkernels::{build_patch_bank, patch_featurize, Image, LabeledDataset, PatchBankOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn default_bank_on_cifar_sized_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images: Vec<Image> = (0..4)
        .map(|_| Image::from_fn(32, 32, 3, |_, _, _| rng.random_range(0.0..1.0)))
        .collect();
    let ds = LabeledDataset::new(images, vec![0, 1, 2, 3], 10, "random").unwrap();
    let bank = build_patch_bank(&ds, &PatchBankOptions::default()).unwrap();
    assert_eq!(bank.filters.len(), 4096);
    let out = patch_featurize(&ds.images[0], &bank).unwrap();
    assert_eq!(out.shape(), (28, 28, 8192));
    let again = build_patch_bank(&ds, &PatchBankOptions::default()).unwrap();
    assert_eq!(bank, again);
}
