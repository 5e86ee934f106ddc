// scratch: overfit trajectory on the shrunk toy
use std::collections::BTreeMap;
use tsrec::corpus::*;
use tsrec::features::{logmel, N_MELS, FRAME_LEN, FRAME_HOP};
use tsrec::labeler::*;
use tsrec::mixer::*;
use tsrec::model::*;
use tsrec::objectives::*;
use tsrec::rng::{stream_rng, Stream};
use tsrec::trainer::*;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec { speakers: 4, utts_per_speaker: 4, seed: 11, min_dur_s: 0.8, max_dur_s: 1.1 };
    let manifest = gen_corpus(dir.path(), &spec).unwrap();
    let mut inv = build_inventory(&manifest).unwrap();
    let cache = AudioCache::preload(&inv).unwrap();
    let mut frames = Vec::new();
    let mut fms = BTreeMap::new();
    for utt in &inv.utterances {
        let fm = logmel(cache.get(utt).unwrap(), N_MELS).unwrap();
        frames.extend_from_slice(&fm.data);
        fms.insert(utt.clone(), fm);
    }
    let cb = kmeans_fit(&frames, N_MELS, 16, 30, 1, (N_MELS, FRAME_LEN, FRAME_HOP)).unwrap();
    for (utt, fm) in &fms {
        inv.labels.insert(utt.clone(), assign_labels(fm, &cb).unwrap());
    }

    let model_cfg = ModelConfig::default();
    let align = model_cfg.label_align();
    for peak_lr in [1e-3, 2e-3, 4e-3] {
        let cfg = TrainConfig {
            steps: 300,
            warmup_steps: 30,
            peak_lr,
            batch_seconds: 6.0,
            seed: 7,
            enroll_max_samples: 12_000,
            save_every: 0,
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let out = dir.path().join(format!("ck_{peak_lr}"));
        let ck = pretrain(&inv, &cb, &model_cfg, &cfg, &out).unwrap();
        let train_time = t0.elapsed();

        let state = ModelState::from_checkpoint(&ck).unwrap();
        let mut acc_sum = 0.0;
        let mut n = 0;
        for b in 0..8u64 {
            let batch = sample_batch(&inv, &cache, 5, 999, b, &align).unwrap();
            for (j, s) in batch.iter().enumerate() {
                let mut trng = stream_rng(999, Stream::EnrollTruncate, &[b, j as u64]);
                let e = truncate_enrollment(&s.enrollment, 12_000, &mut trng);
                let mut mrng = stream_rng(999, Stream::Mask, &[b, j as u64]);
                let mask = sample_masks(s.labels.len(), &mut mrng).unwrap();
                let logits = forward(&state, &s.mixed, Some(&e), &mask, None).unwrap();
                acc_sum += masked_accuracy(&logits, &s.labels, &mask);
                n += 1;
            }
        }
        // trajectory from metrics
        let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        let accs: Vec<String> = metrics.lines().enumerate()
            .filter(|(i, _)| i % 60 == 59)
            .map(|(i, l)| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                format!("s{}={:.3}", i, v["masked_accuracy"].as_f64().unwrap())
            }).collect();
        println!("lr {peak_lr}: {train_time:?}; eval acc {:.4}; train acc trajectory {}", acc_sum / n as f64, accs.join(" "));
    }
}
