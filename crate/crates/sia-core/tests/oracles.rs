//! Forward-pass correctness against independently written oracles: plain
//! nested loops for the linear/convolution kernels, a double loop for the
//! batch hinge loss, a sort-based ranker for recall, and a direct-DFT
//! pipeline for the MFCC extractor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sia_core::mfcc::{
    frame_count, within_length_limit, MfccExtractor, MfccParams, RawAudio, SAMPLE_RATE,
};
use sia_core::objective::{hinge_loss_value, HingeConfig};
use sia_core::ops;
use sia_core::recall::{query, ranks, recall_at_k, similarity_matrix, RecallReport};
use sia_core::tape::Tape;
use sia_core::tensor::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn linear_matches_nested_loop_oracle() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, n, m) = (
            rng.gen_range(1..6),
            rng.gen_range(1..7),
            rng.gen_range(1..5),
        );
        let x = rand_tensor(&[rows, n], &mut rng);
        let w = rand_tensor(&[m, n], &mut rng);
        let b = rand_tensor(&[m], &mut rng);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let y = ops::linear(&mut tape, xv, wv, Some(bv)).unwrap();

        for r in 0..rows {
            for o in 0..m {
                let mut want = b.data()[o];
                for i in 0..n {
                    want += x.at2(r, i) * w.at2(o, i);
                }
                assert!((tape.val(y).at2(r, o) - want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn matmul_matches_nested_loop_oracle() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (m, k, n) = (
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        );
        let a = rand_tensor(&[m, k], &mut rng);
        let b = rand_tensor(&[k, n], &mut rng);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let y = ops::matmul(&mut tape, av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.at2(i, p) * b.at2(p, j)).sum();
                assert!((tape.val(y).at2(i, j) - want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn conv1d_matches_nested_loop_oracle() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (b, cin, cout) = (
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let k = rng.gen_range(1..5);
        let stride = rng.gen_range(1..3);
        let t = k + rng.gen_range(0..8);
        let x = rand_tensor(&[b, t, cin], &mut rng);
        let w = rand_tensor(&[cout, cin, k], &mut rng);
        let bias = rand_tensor(&[cout], &mut rng);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(bias.clone());
        let y = ops::conv1d(&mut tape, xv, wv, bv, stride).unwrap();

        let t_out = (t - k) / stride + 1;
        assert_eq!(tape.val(y).shape(), &[b, t_out, cout]);
        for bi in 0..b {
            for to in 0..t_out {
                for co in 0..cout {
                    let mut want = bias.data()[co];
                    for ci in 0..cin {
                        for j in 0..k {
                            want += x.at3(bi, to * stride + j, ci) * w.at3(co, ci, j);
                        }
                    }
                    assert!((tape.val(y).at3(bi, to, co) - want).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (b, cin, cout) = (1, rng.gen_range(1..3), rng.gen_range(1..3));
        let k = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..2);
        let h = k + rng.gen_range(0..5);
        let wdt = k + rng.gen_range(0..5);
        let x = rand_tensor(&[b, cin, h, wdt], &mut rng);
        let w = rand_tensor(&[cout, cin, k, k], &mut rng);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = ops::conv2d(&mut tape, xv, wv, stride, pad).unwrap();

        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (wdt + 2 * pad - k) / stride + 1;
        assert_eq!(tape.val(y).shape(), &[b, cout, h_out, w_out]);
        let read = |ci: usize, yy: isize, xx: isize| -> f64 {
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= wdt as isize {
                0.0
            } else {
                x.at4(0, ci, yy as usize, xx as usize)
            }
        };
        for co in 0..cout {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut want = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yy = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                want += read(ci, yy, xx) * w.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    assert!((tape.val(y).at4(0, co, oy, ox) - want).abs() <= 1e-12);
                }
            }
        }
    }
}

/// Completely separate accumulation of the batch hinge objective.
fn hinge_oracle(a: &Tensor<f64>, i: &Tensor<f64>, beta: f64) -> f64 {
    let b = a.shape()[0];
    let n = a.shape()[1];
    let dot = |q: usize, r: usize| -> f64 { (0..n).map(|k| a.at2(q, k) * i.at2(r, k)).sum() };
    let mut total = 0.0;
    for q in 0..b {
        for r in 0..b {
            if q == r {
                continue;
            }
            total += (dot(q, r) - dot(q, q) + beta).max(0.0);
            total += (dot(r, q) - dot(q, q) + beta).max(0.0);
        }
    }
    total / (b * (b - 1)) as f64
}

#[test]
fn hinge_matches_double_loop_oracle() {
    for b in 2..=8usize {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + b as u64);
            let n = rng.gen_range(2..6);
            let a = rand_tensor(&[b, n], &mut rng);
            let i = rand_tensor(&[b, n], &mut rng);
            let got = hinge_loss_value(&a, &i, &HingeConfig::default()).unwrap();
            let want = hinge_oracle(&a, &i, 0.2);
            assert!((got - want).abs() <= 1e-10, "B={b} seed={seed}");
        }
    }
}

#[test]
fn hinge_summation_order_is_stable_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let a64 = rand_tensor(&[6, 8], &mut rng);
    let i64 = rand_tensor(&[6, 8], &mut rng);
    let a: Tensor<f32> = a64.cast();
    let i: Tensor<f32> = i64.cast();
    let forward = hinge_loss_value(&a, &i, &HingeConfig::default()).unwrap();
    // Reversed pair order, f32 accumulation.
    let b = 6usize;
    let dot = |q: usize, r: usize| -> f32 { (0..8).map(|k| a.at2(q, k) * i.at2(r, k)).sum() };
    let mut total = 0.0f32;
    for q in (0..b).rev() {
        for r in (0..b).rev() {
            if q == r {
                continue;
            }
            total += (dot(r, q) - dot(q, q) + 0.2).max(0.0);
            total += (dot(q, r) - dot(q, q) + 0.2).max(0.0);
        }
    }
    total /= (b * (b - 1)) as f32;
    assert!((forward - total).abs() <= 1e-6);
}

/// Sort-based rank oracle: order the row descending, placing the aligned
/// item after every tied competitor.
fn sort_rank_oracle(row: &[f64], truth: usize) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap()
            .then_with(|| (a == truth).cmp(&(b == truth)))
    });
    idx.iter().position(|&i| i == truth).unwrap() + 1
}

#[test]
fn recall_matches_sort_oracle() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let q = rng.gen_range(1..=100);
        // Coarse values provoke ties.
        let m = Tensor::from_fn(&[q, q], |_| (rng.gen_range(0..8) as f64) / 8.0);
        let got = ranks(&m).unwrap();
        for row in 0..q {
            let r: Vec<f64> = (0..q).map(|c| m.at2(row, c)).collect();
            assert_eq!(got[row], sort_rank_oracle(&r, row), "seed={seed} row={row}");
        }
        for k in 1..=q {
            let want =
                (0..q).filter(|&row| got[row] <= k).count() as f64 / q as f64;
            assert_eq!(recall_at_k(&got, k).unwrap(), want);
        }
        assert_eq!(recall_at_k(&got, q).unwrap(), 1.0);
    }
}

#[test]
fn query_matches_sort_oracle() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let (rows, n) = (rng.gen_range(1..30), rng.gen_range(1..6));
        let gallery = Tensor::from_fn(&[rows, n], |_| (rng.gen_range(0..5) as f64) / 5.0);
        let probe: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = rng.gen_range(1..=rows + 2);
        let got = query(&probe, &gallery, k).unwrap();

        let score = |r: usize| -> f64 { (0..n).map(|i| probe[i] * gallery.at2(r, i)).sum() };
        let mut idx: Vec<usize> = (0..rows).collect();
        idx.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(a.cmp(&b)));
        idx.truncate(k.min(rows));
        assert_eq!(got, idx, "seed={seed}");
    }
}

#[test]
fn recall_report_directions_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&[12, 5], &mut rng);
    let i = rand_tensor(&[12, 5], &mut rng);
    let rep = RecallReport::compute(&a, &i, &[1, 5, 10]).unwrap();
    // i2s of S equals s2i computed on swapped arguments' transpose: swap the
    // embedding roles and the directions swap.
    let swapped = RecallReport::compute(&i, &a, &[1, 5, 10]).unwrap();
    let s = similarity_matrix(&a, &i).unwrap();
    let st = similarity_matrix(&i, &a).unwrap();
    for qq in 0..12 {
        for rr in 0..12 {
            assert!((s.at2(qq, rr) - st.at2(rr, qq)).abs() <= 1e-12);
        }
    }
    assert_eq!(rep.i2s_ranks, swapped.s2i_ranks);
    assert_eq!(rep.s2i_ranks, swapped.i2s_ranks);
}

// ---------------------------------------------------------------------------
// Independent MFCC pipeline
// ---------------------------------------------------------------------------

/// Reflected read implemented as a bouncing walk (no modular arithmetic).
fn bounce_read(signal: &[f64], pos: isize) -> f64 {
    let n = signal.len() as isize;
    if n == 1 {
        return signal[0];
    }
    let mut p = 0isize;
    let mut dir = 1isize;
    let steps = pos.unsigned_abs();
    for _ in 0..steps {
        if p + dir < 0 || p + dir >= n {
            dir = -dir;
        }
        p += dir;
    }
    signal[p as usize]
}

/// From-scratch MFCC: reflect pad, periodic Hann, direct DFT, triangular mel
/// filters, dB floor, orthonormal DCT-II.
fn mfcc_oracle(signal: &[f64]) -> Vec<Vec<f64>> {
    let (n_fft, hop, n_mels, n_mfcc, sr) = (400usize, 200usize, 128usize, 40usize, 16000.0f64);
    let bins = n_fft / 2 + 1;
    let t_frames = signal.len() / hop + 1;
    let hz2mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let mel2hz = |m: f64| 700.0 * (10.0f64.powf(m / 2595.0) - 1.0);
    let mel_top = hz2mel(sr / 2.0);
    let edge = |i: usize| mel2hz(mel_top * i as f64 / (n_mels + 1) as f64);

    let mut out = Vec::with_capacity(t_frames);
    for ti in 0..t_frames {
        // Windowed frame via bouncing reads around the pad offset.
        let frame: Vec<f64> = (0..n_fft)
            .map(|j| {
                let window =
                    0.5 * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / n_fft as f64).cos());
                let pos = (ti * hop + j) as isize - (n_fft / 2) as isize;
                bounce_read(signal, pos) * window
            })
            .collect();
        // Direct DFT, no tables.
        let power: Vec<f64> = (0..bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &s) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * j) as f64 / n_fft as f64;
                    re += s * ang.cos();
                    im += s * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        // Mel energies and dB.
        let mel_db: Vec<f64> = (0..n_mels)
            .map(|m| {
                let (lo, center, hi) = (edge(m), edge(m + 1), edge(m + 2));
                let energy: f64 = (0..bins)
                    .map(|k| {
                        let f = k as f64 * sr / n_fft as f64;
                        let weight = if f <= lo || f >= hi {
                            0.0
                        } else if f <= center {
                            (f - lo) / (center - lo)
                        } else {
                            (hi - f) / (hi - center)
                        };
                        weight * power[k]
                    })
                    .sum();
                10.0 * energy.max(1e-10).log10()
            })
            .collect();
        // Orthonormal DCT-II, first n_mfcc coefficients.
        let coeffs: Vec<f64> = (0..n_mfcc)
            .map(|k| {
                let scale = if k == 0 {
                    (1.0 / n_mels as f64).sqrt()
                } else {
                    (2.0 / n_mels as f64).sqrt()
                };
                scale
                    * mel_db
                        .iter()
                        .enumerate()
                        .map(|(m, &v)| {
                            v * (std::f64::consts::PI * k as f64 * (2 * m + 1) as f64
                                / (2 * n_mels) as f64)
                                .cos()
                        })
                        .sum::<f64>()
            })
            .collect();
        out.push(coeffs);
    }
    out
}

fn assert_mfcc_matches(signal: Vec<f64>, label: &str) {
    let ext = MfccExtractor::new(MfccParams::default()).unwrap();
    let audio = RawAudio::new(signal.clone(), SAMPLE_RATE).unwrap();
    let got = ext.process(&audio, label).unwrap();
    let want = mfcc_oracle(&signal);
    assert_eq!(got.num_frames(), want.len(), "{label}");
    for (t, row) in want.iter().enumerate() {
        for (k, &w) in row.iter().enumerate() {
            let g = got.frames.at2(t, k);
            assert!(
                (g - w).abs() <= 1e-6 * w.abs().max(1.0),
                "{label} frame {t} coeff {k}: {g} vs {w}"
            );
        }
    }
}

#[test]
fn mfcc_matches_independent_oracle_on_zero_signal() {
    assert_mfcc_matches(vec![0.0; 1600], "zero");
}

#[test]
fn mfcc_matches_independent_oracle_on_sine() {
    let signal: Vec<f64> = (0..4000)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16000.0).sin())
        .collect();
    assert_mfcc_matches(signal, "sine");
}

#[test]
fn mfcc_matches_independent_oracle_on_seeded_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let signal: Vec<f64> = (0..3333).map(|_| rng.gen_range(-0.8..0.8)).collect();
    assert_mfcc_matches(signal, "noise");
}

#[test]
fn mfcc_matches_independent_oracle_on_short_signal() {
    // Shorter than the pad width, exercising the bouncing reflection.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let signal: Vec<f64> = (0..150).map(|_| rng.gen_range(-0.5..0.5)).collect();
    assert_mfcc_matches(signal, "short");
}

#[test]
fn frame_count_formula_by_enumeration() {
    let params = MfccParams::default();
    for len in 1..=10_000usize {
        // Oracle: count window starts that fit in the padded signal.
        let padded = len + 2 * (params.n_fft / 2);
        let mut count = 0;
        let mut start = 0;
        while start + params.n_fft <= padded {
            count += 1;
            start += params.hop;
        }
        assert_eq!(frame_count(len, &params), count, "len={len}");
        assert_eq!(count, len / 200 + 1, "len={len}");
    }
}

#[test]
fn one_khz_sine_energy_concentrates_in_bracketing_bands() {
    use sia_core::mfcc::{frame_signal, mel_centers, mel_energies};
    let params = MfccParams::default();
    let ext = MfccExtractor::new(params.clone()).unwrap();
    let signal: Vec<f64> = (0..1600)
        .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16000.0).sin())
        .collect();
    let audio = RawAudio::new(signal, SAMPLE_RATE).unwrap();
    let frames = frame_signal(&audio, &params).unwrap();
    let centers = mel_centers(&params);
    // Interior frame (no reflection edge effects).
    let energies = mel_energies(&ext, &frames[4]);
    let total: f64 = energies.iter().sum();
    // The Hann main lobe spans roughly +-2 bins (+-80 Hz); allow the filter
    // triangles overlapping that span.
    let near: f64 = energies
        .iter()
        .zip(&centers)
        .filter(|(_, &c)| (c - 1000.0).abs() <= 120.0)
        .map(|(&e, _)| e)
        .sum();
    assert!(total > 0.0);
    assert!(near / total >= 0.9, "fraction {}", near / total);
}

#[test]
fn over_cap_clip_is_flagged() {
    // 8192 frames correspond to 1_638_200 samples at hop 200; one hop more
    // crosses the cap.
    let params = MfccParams::default();
    assert_eq!(frame_count(8191 * 200, &params), 8192);
    assert_eq!(frame_count(8192 * 200, &params), 8193);
    let ext = MfccExtractor::new(params).unwrap();
    let audio = RawAudio::new(vec![0.01; 240], SAMPLE_RATE).unwrap();
    let seq = ext.process(&audio, "ok").unwrap();
    assert!(within_length_limit(&seq));
}
