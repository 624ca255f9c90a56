mod common;

use noiseprompt_core::data::write_pairs;
use noiseprompt_nn::genpipe::{crop_to_multiple_of_8, read_manifest, synthesize_dataset, Generator, NoiseBank, NoiseSource};
use noiseprompt_nn::gradcheck::randomize;

fn generator(seed: u64) -> Generator {
    let run = common::tiny_run(seed);
    let (pae, pdit) = common::untrained_models(&run);
    // random weights so outputs depend on the inputs and seeds
    randomize(&pae.params, 1, 0.05).unwrap();
    randomize(&pdit.model.params, 2, 0.05).unwrap();
    Generator::new(pae, pdit, false).unwrap()
}

#[test]
fn generation_is_keyed_by_seed() {
    let g = generator(1);
    let pairs = common::toy(2, 16, 1);
    let a = g.generate_paired(&pairs[0].clean, &pairs[0].noisy, 7).unwrap();
    let b = g.generate_paired(&pairs[0].clean, &pairs[0].noisy, 7).unwrap();
    let c = g.generate_paired(&pairs[0].clean, &pairs[0].noisy, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.image, c.image);
    assert_eq!(a.image.shape(), (16, 16));
    assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!((0.0..=1.0).contains(&a.saturation));
}

#[test]
fn batch_items_match_single_generation() {
    let g = generator(2);
    let pairs = common::toy(2, 16, 2);
    let clean: Vec<_> = pairs.iter().map(|p| p.clean.clone()).collect();
    let res: Vec<_> = pairs.iter().map(|p| p.residual()).collect();
    let batch = g.generate_batch(&clean, &res, &[3, 4]).unwrap();
    for (i, s) in [3u64, 4].iter().enumerate() {
        let one = g.generate_paired(&pairs[i].clean, &pairs[i].noisy, *s).unwrap();
        let err = one.image.data.iter().zip(&batch[i].image.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5, "{err}");
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let g = generator(3);
    let pairs = common::toy(1, 20, 3);
    // 20 is not a multiple of 8
    assert!(g.generate_paired(&pairs[0].clean, &pairs[0].noisy, 1).unwrap_err().is_contract());
    let empty = NoiseBank::default();
    let c = crop_to_multiple_of_8(&pairs[0].clean).unwrap();
    assert_eq!(c.shape(), (16, 16));
    assert!(g.generate_unpaired(&c, &empty, 1).unwrap_err().is_contract());
}

#[test]
fn mismatched_pae_is_refused_unless_overridden() {
    let run = common::tiny_run(4);
    let (pae, mut pdit) = common::untrained_models(&run);
    pdit.pae_fingerprint = "other".into();
    assert!(Generator::new(pae.clone(), pdit.clone(), false).unwrap_err().is_config());
    assert!(Generator::new(pae, pdit, true).is_ok());
}

#[test]
fn unpaired_generation_uses_the_bank() {
    let g = generator(5);
    let train = common::dataset(3, 16, 5);
    let bank = NoiseBank::from_dataset(&train);
    assert_eq!(bank.len(), 3);
    let clean = common::toy(1, 24, 50)[0].clean.clone();
    let (out, id) = g.generate_unpaired(&clean, &bank, 9).unwrap();
    assert_eq!(out.image.shape(), (24, 24));
    assert!(bank.entries.iter().any(|(k, _)| *k == id));
    let (again, id2) = g.generate_unpaired(&clean, &bank, 9).unwrap();
    assert_eq!((out, id), (again, id2));
}

#[test]
fn synthesized_dataset_has_one_row_per_output_and_reruns_identically() {
    let g = generator(6);
    let src = tempfile::tempdir().unwrap();
    write_pairs(&common::toy(3, 16, 6), src.path(), "clean", "noisy").unwrap();
    for multiplier in [1usize, 4] {
        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        let source = NoiseSource::Paired(src.path().join("noisy"));
        let rows = synthesize_dataset(&g, &src.path().join("clean"), &source, multiplier, out_a.path(), 11, true).unwrap();
        assert_eq!(rows.len(), 3 * multiplier);
        assert_eq!(read_manifest(&out_a.path().join("manifest.jsonl")).unwrap(), rows);
        assert_eq!(std::fs::read_dir(out_a.path().join("noisy")).unwrap().count(), 2 * 3 * multiplier);
        synthesize_dataset(&g, &src.path().join("clean"), &source, multiplier, out_b.path(), 11, true).unwrap();
        for entry in std::fs::read_dir(out_a.path().join("noisy")).unwrap() {
            let p = entry.unwrap().path();
            let q = out_b.path().join("noisy").join(p.file_name().unwrap());
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        }
        let seeds: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), rows.len());
    }
}
