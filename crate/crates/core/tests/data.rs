//! Embedding file formats, the synthetic generator and batching.

use std::collections::HashSet;
use std::fs;

use mstdt::data::{
    decode_dataset, decode_pairs, encode_captions, encode_pairs, encode_videos, generate_synthetic, make_batches,
    EmbeddingDataset, SynthSpec, CAPTION_FILE, PAIR_FILE, VIDEO_FILE,
};
use mstdt::Error;
use proptest::prelude::*;

fn small(seed: u64) -> EmbeddingDataset {
    generate_synthetic(&SynthSpec {
        seed,
        num_videos: 6,
        captions_per_video: 2,
        dim: 5,
        n_max: 8,
        cluster_count: 3,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn encode(ds: &EmbeddingDataset) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    (encode_videos(&ds.videos, ds.n_max, ds.dim), encode_captions(&ds.captions, ds.dim), encode_pairs(&ds.pairs))
}

#[test]
fn files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(1);
    ds.write_dir(dir.path()).unwrap();
    let loaded = EmbeddingDataset::load_dir(dir.path()).unwrap();
    // values are stored as f32
    for (a, b) in ds.videos.iter().zip(&loaded.videos) {
        assert_eq!(a.valid_count(), b.valid_count());
        for (x, y) in a.frames().values().iter().zip(b.frames().values()) {
            assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            assert_eq!(f64::from(*x as f32), *y);
        }
    }
    assert_eq!(loaded.pairs, ds.pairs);
    let again = tempfile::tempdir().unwrap();
    loaded.write_dir(again.path()).unwrap();
    for f in [VIDEO_FILE, CAPTION_FILE, PAIR_FILE] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(EmbeddingDataset::load_dir(again.path()).unwrap(), loaded);
}

#[test]
fn every_truncation_is_a_format_error() {
    let (v, c, p) = encode(&small(2));
    for cut in 0..v.len() {
        assert!(matches!(decode_dataset(&v[..cut], &c, &p), Err(Error::Format(_))), "videos cut at {cut}");
    }
    for cut in 0..c.len() {
        assert!(matches!(decode_dataset(&v, &c[..cut], &p), Err(Error::Format(_))), "captions cut at {cut}");
    }
    for cut in 0..p.len() {
        assert!(matches!(decode_pairs(&p[..cut]), Err(Error::Format(_))), "pairs cut at {cut}");
    }
}

#[test]
fn malformed_files_are_rejected() {
    let ds = small(3);
    let (v, c, p) = encode(&ds);
    let fmt = |r: mstdt::Result<EmbeddingDataset>| matches!(r, Err(Error::Format(_)));

    let mut bad = v.clone();
    bad[0] = b'X';
    assert!(fmt(decode_dataset(&bad, &c, &p)));

    let mut trailing = v.clone();
    trailing.push(0);
    assert!(fmt(decode_dataset(&trailing, &c, &p)));

    let mut version = v.clone();
    version[8] = 2;
    assert!(fmt(decode_dataset(&version, &c, &p)));

    // captions file passed as videos
    assert!(fmt(decode_dataset(&c, &c, &p)));

    let narrow: Vec<Vec<f64>> = ds.captions.iter().map(|x| x[..4].to_vec()).collect();
    assert!(fmt(decode_dataset(&v, &encode_captions(&narrow, 4), &p)));

    let mut dangling = ds.pairs.clone();
    dangling.push((0, ds.videos.len()));
    assert!(fmt(decode_dataset(&v, &c, &encode_pairs(&dangling))));

    let orphan: Vec<_> = ds.pairs.iter().copied().filter(|&(_, vid)| vid != 0).collect();
    assert!(fmt(decode_dataset(&v, &c, &encode_pairs(&orphan))));

    // valid_count of the first video set to zero
    let mut empty = v.clone();
    empty[25..29].copy_from_slice(&0u32.to_le_bytes());
    assert!(fmt(decode_dataset(&empty, &c, &p)));

    let mut nan = v.clone();
    nan[29..33].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(fmt(decode_dataset(&nan, &c, &p)));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(EmbeddingDataset::load_dir(dir.path()), Err(Error::Io(_))));
}

#[test]
fn split_keeps_captions_with_their_videos() {
    let ds = small(4);
    let (train, test) = ds.split_tail(2).unwrap();
    assert_eq!((train.videos.len(), test.videos.len()), (4, 2));
    assert_eq!((train.captions.len(), test.captions.len()), (8, 4));
    assert_eq!(test.videos[0], ds.videos[4]);
    assert!(matches!(ds.split_tail(6), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn generated_datasets_are_well_formed(
        seed in any::<u64>(),
        num_videos in 1usize..20,
        captions_per_video in 1usize..4,
        dim in 1usize..8,
        n_max in 2usize..10,
        clusters in 1usize..20,
        motion in any::<bool>(),
    ) {
        let clusters = clusters.min(num_videos);
        let spec = SynthSpec { seed, num_videos, captions_per_video, dim, n_max, cluster_count: clusters, noise_sigma: 0.2, motion_signal: motion };
        let ds = match generate_synthetic(&spec) {
            Ok(ds) => ds,
            Err(Error::Config(_)) => {
                prop_assert!(motion && clusters % 2 == 1);
                return Ok(());
            }
            Err(e) => panic!("{e}"),
        };
        prop_assert_eq!(ds.videos.len(), num_videos);
        prop_assert_eq!(ds.captions.len(), num_videos * captions_per_video);
        prop_assert!(ds.videos.iter().all(|v| v.valid_count() >= 1 && v.valid_count() <= n_max));
        for v in &ds.videos {
            let pad = &v.frames().values()[v.valid_count() * dim..];
            prop_assert!(pad.iter().all(|&x| x == 0.0));
        }
        let owners = ds.caption_owners().unwrap();
        for v in 0..num_videos {
            prop_assert_eq!(owners.iter().filter(|&&o| o == v).count(), captions_per_video);
        }
        let (a, b, c) = encode(&ds);
        let back = decode_dataset(&a, &b, &c).unwrap();
        prop_assert_eq!(encode(&back), (a, b, c));
    }

    #[test]
    fn batches_hold_distinct_videos(
        seed in any::<u64>(),
        num_videos in 2usize..20,
        captions_per_video in 1usize..4,
        batch_size in 2usize..9,
        drop_last in any::<bool>(),
    ) {
        let ds = generate_synthetic(&SynthSpec { seed, num_videos, captions_per_video, dim: 2, n_max: 2, cluster_count: 1, ..SynthSpec::default() }).unwrap();
        let batches = make_batches(&ds, batch_size, seed, drop_last).unwrap();
        prop_assert_eq!(&batches, &make_batches(&ds, batch_size, seed, drop_last).unwrap());
        let mut used = HashSet::new();
        for b in &batches {
            prop_assert!(b.len() >= 2 && b.len() <= batch_size);
            if drop_last {
                prop_assert_eq!(b.len(), batch_size);
            }
            let videos: HashSet<_> = b.iter().map(|&p| ds.pairs[p].1).collect();
            prop_assert_eq!(videos.len(), b.len());
            for &p in b {
                prop_assert!(used.insert(p));
            }
        }
        if !drop_last && captions_per_video == 1 {
            let total: usize = batches.iter().map(Vec::len).sum();
            prop_assert!(total + 1 >= ds.pairs.len());
        }
    }
}

#[test]
fn batch_size_below_two_is_a_config_error() {
    assert!(matches!(make_batches(&small(0), 1, 0, false), Err(Error::Config(_))));
}
