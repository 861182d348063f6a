//! Acceptance gate. Every criterion runs inside the single `acceptance_suite` test, which
//! prints one PASS/FAIL line per criterion and fails if any of them fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use speechdst::autodiff::Graph;
use speechdst::config::{desk_model, RunConfig};
use speechdst::connector::{stack_downsample, SoftPromptSequence};
use speechdst::data::{derive_ontology, generate_synthetic, SynthSpec};
use speechdst::inference::{fallback_state, HistoryMode, HistorySource, interpret_output, PredictionLine, TurnPrediction};
use speechdst::lm::{inject_lora, merge_lora, AdaptedLm, LmSpec, ToyLm};
use speechdst::lora::LoraConfig;
use speechdst::metrics::{canonicalize, joint_goal_accuracy, report_from_pairs, slot_error_rate, AliasTable, Ser};
use speechdst::model::{ModelConfig, SpeechDstModel};
use speechdst::pipeline::{self, SplitSizes, SyntheticSplits};
use speechdst::postprocess::{fuzzy_normalize, similarity_ratio, DEFAULT_FUZZY_THRESHOLD};
use speechdst::prompting::{json_string, serialize_state, DialogueState};
use speechdst::tensor::Matrix;
use speechdst::training::{compute_nll, dst_examples, train_stage2, Stage, StageConfig};

const C1_TRIPLES: usize = 500;
const C1_MAX_SECONDS: f64 = 10.0;
const C2_IDENTITY_TOL: f64 = 1e-6;
const C2_MERGE_TOL: f64 = 1e-5;
const C2_INPUTS: usize = 100;
const C2_STEPS: usize = 50;
const C2_MAX_SECONDS: f64 = 60.0;
const C3_LN_V_TOL: f64 = 1e-6;
const C4_PAIRS: usize = 1000;
const C4_FUZZED: usize = 1000;
const C5_CORPORA: usize = 200;
const C8_OUTPUTS: usize = 1000;

type Check = Result<String, String>;

struct Outcome {
    id: u8,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn run(id: u8, name: &'static str, f: impl FnOnce() -> Check) -> Outcome {
    let t = Instant::now();
    let (passed, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(p) => (false, format!("panicked: {}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())),
    };
    let o = Outcome { id, name, passed, detail, elapsed: t.elapsed() };
    eprintln!("criterion {} finished in {:.1}s", o.id, o.elapsed.as_secs_f64());
    o
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1: downsampling

fn brute_stack(frames: &Matrix<f64>, k: usize) -> Vec<Vec<f64>> {
    let (t, f) = frames.shape();
    let mut out = Vec::new();
    let mut start = 0;
    while start < t {
        let mut row = Vec::with_capacity(k * f);
        for j in 0..k {
            for c in 0..f {
                row.push(if start + j < t { frames.get(start + j, c) } else { 0.0 });
            }
        }
        out.push(row);
        start += k;
    }
    out
}

fn c1_downsampling() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..C1_TRIPLES {
        let (t, k, f) = (rng.gen_range(1..=120), rng.gen_range(1..=9), rng.gen_range(1..=12));
        let frames = Matrix::from_fn(t, f, |_, _| rng.gen_range(-1.0..1.0));
        let got = stack_downsample(&frames, k).map_err(|e| format!("case {case}: {e}"))?;
        let want = brute_stack(&frames, k);
        ensure(got.rows() == t.div_ceil(k) && got.rows() == want.len(), || format!("case {case} (T={t},k={k},F={f}): {} rows", got.rows()))?;
        ensure(got.cols() == k * f, || format!("case {case}: {} cols", got.cols()))?;
        for (i, row) in want.iter().enumerate() {
            ensure(got.row(i) == row.as_slice(), || format!("case {case} (T={t},k={k},F={f}): row {i} differs"))?;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < C1_MAX_SECONDS, || format!("took {secs:.2}s"))?;
    Ok(format!("{C1_TRIPLES} triples exact, {secs:.2}s"))
}

// ---------------------------------------------------------------- 2: LoRA

fn small_lm_spec() -> LmSpec {
    LmSpec { vocab_size: 259, embed_dim: 32, layers: 2, heads: 4, max_context: 96, ffn_dim: 64 }
}

fn random_input(rng: &mut ChaCha8Rng, d: usize) -> (SoftPromptSequence<f32>, Vec<usize>) {
    let p = rng.gen_range(0..6);
    let prefix = SoftPromptSequence { embeddings: Matrix::randn(p, d, 1.0, rng), source_length: p };
    let ids = (0..rng.gen_range(1..40)).map(|_| rng.gen_range(0..259)).collect();
    (prefix, ids)
}

fn max_logit_gap(a: &AdaptedLm<f32>, b: &AdaptedLm<f32>, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..C2_INPUTS {
        let (prefix, ids) = random_input(&mut rng, a.spec().embed_dim);
        let la = a.forward_with_prefix(&prefix, &ids).map_err(|e| e.to_string())?;
        let lb = b.forward_with_prefix(&prefix, &ids).map_err(|e| e.to_string())?;
        worst = worst.max(la.max_abs_diff(&lb) as f64);
    }
    Ok(worst)
}

fn tiny_model_config() -> ModelConfig {
    let mut cfg = desk_model();
    cfg.lm = LmSpec { embed_dim: 32, layers: 1, heads: 2, ffn_dim: 64, max_context: 320, ..cfg.lm };
    cfg.connector.lm_dim = 32;
    cfg
}

fn c2_lora() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let base = ToyLm::<f32>::new(small_lm_spec(), &mut rng).map_err(|e| e.to_string())?;
    let plain = AdaptedLm::plain(base.clone());
    let mut adapted = inject_lora(base.clone(), &LoraConfig::with_rank(4), &mut rng).map_err(|e| e.to_string())?;
    let identity = max_logit_gap(&plain, &adapted, 1)?;
    ensure(identity < C2_IDENTITY_TOL, || format!("adapted-at-init differs from base by {identity:e}"))?;

    let lora = adapted.lora_mut().expect("adapters attached").params_mut();
    for i in 0..lora.len() {
        let shape = lora.get(i).shape();
        *lora.get_mut(i) = Matrix::randn(shape.0, shape.1, 0.1, &mut rng);
    }
    let merged = AdaptedLm::plain(merge_lora(adapted.clone()).map_err(|e| e.to_string())?);
    let merge_gap = max_logit_gap(&adapted, &merged, 2)?;
    ensure(merge_gap < C2_MERGE_TOL, || format!("merged logits differ by {merge_gap:e}"))?;
    let moved = max_logit_gap(&adapted, &plain, 3)?;
    ensure(moved > 1e-3, || format!("random adapters barely change logits ({moved:e})"))?;

    let corpus = generate_synthetic(&SynthSpec { seed: 3, n_dialogues: 8, ..SynthSpec::default() }).map_err(|e| e.to_string())?;
    let mut model = SpeechDstModel::<f32>::new(&tiny_model_config(), 5).map_err(|e| e.to_string())?;
    let examples = dst_examples(&model, &corpus, true).map_err(|e| e.to_string())?;
    let lm_before = model.lm.base().params().checksum();
    let enc_before = model.encoder.params().map(|p| p.checksum());
    let conn_before = model.connector.params().checksum();
    let cfg = StageConfig { max_steps: Some(C2_STEPS), batch_size: 4, learning_rate: 5e-3, warmup_steps: 5, lora: Some(LoraConfig::with_rank(4)), ..StageConfig::for_stage(Stage::JointDst) };
    let report = train_stage2(&mut model, &[examples], &[], &cfg).map_err(|e| e.to_string())?;
    ensure(report.steps == C2_STEPS, || format!("ran {} steps", report.steps))?;
    ensure(model.lm.base().params().checksum() == lm_before, || "base LM weights changed".into())?;
    ensure(model.encoder.params().map(|p| p.checksum()) == enc_before, || "encoder weights changed".into())?;
    ensure(model.connector.params().checksum() != conn_before, || "connector did not train".into())?;
    let b_norm: f64 = {
        let l = model.lm.lora().expect("adapters attached").params();
        (0..l.len()).filter(|&i| l.params()[i].name.ends_with("lora_b")).map(|i| l.get(i).sum_sq() as f64).sum()
    };
    ensure(b_norm > 0.0, || "LoRA B factors still zero".into())?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < C2_MAX_SECONDS, || format!("took {secs:.1}s"))?;
    Ok(format!("identity gap {identity:.1e}, merge gap {merge_gap:.1e}, base bit-identical after {C2_STEPS} steps, {secs:.1}s"))
}

// ---------------------------------------------------------------- 3: loss masking

fn c3_masking() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let v = 259;
    for case in 0..50 {
        let n = rng.gen_range(2..30);
        let logits = Matrix::<f64>::randn(n, v, 2.0, &mut rng);
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        mask[rng.gen_range(0..n)] = true;
        let base = compute_nll(&logits, &targets, &mask).map_err(|e| e.to_string())?;

        let mut t2 = targets.clone();
        let mut l2 = logits.clone();
        for i in (0..n).filter(|&i| !mask[i]) {
            t2[i] = rng.gen_range(0..v);
            for c in 0..v {
                l2.set(i, c, rng.gen_range(-50.0..50.0));
            }
        }
        let perturbed = compute_nll(&l2, &t2, &mask).map_err(|e| e.to_string())?;
        ensure(perturbed == base, || format!("case {case}: masked perturbation moved the loss by {:e}", perturbed - base))?;

        let mut g = Graph::new();
        let x = g.input(logits.clone(), true);
        let loss = g.cross_entropy(x, &targets, &mask);
        g.backward(loss);
        let grad = g.grad(x).ok_or("no gradient for logits")?;
        for i in 0..n {
            let zero = grad.row(i).iter().all(|&z| z == 0.0);
            ensure(zero == !mask[i], || format!("case {case}: row {i} gradient zero={zero}, mask={}", mask[i]))?;
        }
    }
    let uniform = Matrix::<f64>::zeros(7, v);
    let nll = compute_nll(&uniform, &[0, 5, 9, 100, 256, 257, 258], &[true; 7]).map_err(|e| e.to_string())?;
    let gap = (nll - (v as f64).ln()).abs();
    ensure(gap < C3_LN_V_TOL, || format!("uniform NLL {nll} vs ln V {}", (v as f64).ln()))?;
    let uniform32 = Matrix::<f32>::filled(3, v, 0.25);
    let gap32 = (compute_nll(&uniform32, &[1, 2, 3], &[true; 3]).map_err(|e| e.to_string())? - (v as f64).ln()).abs();
    ensure(gap32 < C3_LN_V_TOL, || format!("f32 uniform NLL off by {gap32:e}"))?;
    Ok(format!("50 cases invariant and zero-gradient on masked rows, |NLL - ln V| = {gap:.1e} (f32 {gap32:.1e})"))
}

// ---------------------------------------------------------------- 4: fuzzy matching

fn oracle_clean(s: &str) -> Vec<char> {
    let mut out = Vec::new();
    let mut pending_space = false;
    for c in s.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if c.is_alphanumeric() {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// Longest common block via a full DP table, earliest `i` then earliest `j` on ties.
fn oracle_block(a: &[char], b: &[char], (alo, ahi, blo, bhi): (usize, usize, usize, usize)) -> (usize, usize, usize) {
    let w = bhi - blo + 1;
    let mut dp = vec![0usize; (ahi - alo + 1) * w];
    let mut best = (alo, blo, 0);
    for i in alo..ahi {
        for j in blo..bhi {
            if a[i] == b[j] {
                let len = dp[(i - alo) * w + (j - blo)] + 1;
                dp[(i - alo + 1) * w + (j - blo + 1)] = len;
                let (si, sj) = (i + 1 - len, j + 1 - len);
                if len > best.2 || (len == best.2 && (si, sj) < (best.0, best.1)) {
                    best = (si, sj, len);
                }
            }
        }
    }
    best
}

fn oracle_matches(a: &[char], b: &[char], range: (usize, usize, usize, usize)) -> usize {
    let (alo, ahi, blo, bhi) = range;
    if alo >= ahi || blo >= bhi {
        return 0;
    }
    let (i, j, k) = oracle_block(a, b, range);
    if k == 0 {
        return 0;
    }
    k + oracle_matches(a, b, (alo, i, blo, j)) + oracle_matches(a, b, (i + k, ahi, j + k, bhi))
}

fn oracle_ratio(a: &str, b: &str) -> u32 {
    let (a, b) = (oracle_clean(a), oracle_clean(b));
    let total = (a.len() + b.len()) as u64;
    if total == 0 {
        return 100;
    }
    let num = 200 * oracle_matches(&a, &b, (0, a.len(), 0, b.len())) as u64;
    // round half to even on num / total
    let lower = num / total;
    let twice_rem = 2 * (num - lower * total);
    match twice_rem.cmp(&total) {
        std::cmp::Ordering::Less => lower as u32,
        std::cmp::Ordering::Greater => lower as u32 + 1,
        std::cmp::Ordering::Equal => (lower + lower % 2) as u32,
    }
}

fn random_text(rng: &mut ChaCha8Rng, alphabet: &[char], max: usize) -> String {
    (0..rng.gen_range(0..=max)).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

fn mutate(rng: &mut ChaCha8Rng, s: &str) -> String {
    let noise: Vec<char> = "abcdefghijklmnopqrstuvwxyz ABCZ-'!.0".chars().collect();
    let mut c: Vec<char> = s.chars().collect();
    for _ in 0..rng.gen_range(0..4) {
        match rng.gen_range(0..4) {
            0 if !c.is_empty() => {
                c.remove(rng.gen_range(0..c.len()));
            }
            1 => c.insert(rng.gen_range(0..=c.len()), noise[rng.gen_range(0..noise.len())]),
            2 if !c.is_empty() => {
                let i = rng.gen_range(0..c.len());
                c[i] = noise[rng.gen_range(0..noise.len())];
            }
            _ => c = c.iter().map(|ch| if rng.gen_bool(0.3) { ch.to_ascii_uppercase() } else { *ch }).collect(),
        }
    }
    c.into_iter().collect()
}

fn c4_fuzzy() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let alphabet: Vec<char> = "aabbcde  fgh.,-!Aé".chars().collect();
    for case in 0..C4_PAIRS {
        let a = random_text(&mut rng, &alphabet, 14);
        let b = if rng.gen_bool(0.4) { mutate(&mut rng, &a) } else { random_text(&mut rng, &alphabet, 14) };
        let (got, want) = (similarity_ratio(&a, &b), oracle_ratio(&a, &b));
        ensure(got == want, || format!("pair {case} ({a:?}, {b:?}): {got} vs oracle {want}"))?;
    }

    let corpus = generate_synthetic(&SynthSpec { n_domains: 4, slots_per_domain: 4, values_per_slot: 8, n_dialogues: 200, ..SynthSpec::default() }).map_err(|e| e.to_string())?;
    let mut ont = derive_ontology(&corpus);
    ont.insert("hotel-name", vec!["acorn guest house".into(), "alpha lodge".into()], false).map_err(|e| e.to_string())?;
    let slots: Vec<(String, Vec<String>, bool)> = ont.slots().map(|s| (s.name.clone(), s.values.clone(), s.categorical)).collect();
    let (mut changed, mut kept) = (0, 0);
    for case in 0..C4_FUZZED {
        let (slot, values, categorical) = &slots[rng.gen_range(0..slots.len())];
        let pick = rng.gen_range(0..values.len());
        let value = mutate(&mut rng, &values[pick]);
        let value = if value.trim().is_empty() { "x".to_string() } else { value };
        let out = fuzzy_normalize(slot, &value, &ont, DEFAULT_FUZZY_THRESHOLD);
        ensure(out == value || values.contains(&out), || format!("case {case}: {value:?} -> {out:?} is neither input nor ontology member"))?;
        ensure(fuzzy_normalize(slot, &out, &ont, DEFAULT_FUZZY_THRESHOLD) == out, || format!("case {case}: not idempotent on {value:?}"))?;
        if !categorical {
            ensure(out == value, || format!("case {case}: non-categorical slot rewritten"))?;
        }
        if out != value {
            let r = similarity_ratio(&value, &out);
            ensure(r >= DEFAULT_FUZZY_THRESHOLD, || format!("case {case}: rewrite below threshold ({r})"))?;
            let best = values.iter().map(|v| oracle_ratio(&value, v)).max().unwrap_or(0);
            ensure(oracle_ratio(&value, &out) == best, || format!("case {case}: {out:?} is not the closest candidate"))?;
            changed += 1;
        } else {
            kept += 1;
        }
    }
    Ok(format!("{C4_PAIRS} ratios match the DP oracle; {C4_FUZZED} fuzzed values idempotent and in-ontology ({changed} rewritten, {kept} kept)"))
}

// ---------------------------------------------------------------- 5: metrics

fn fold(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Naive per-turn double loop over gold and predicted slots.
fn oracle_metrics(preds: &[DialogueState], golds: &[DialogueState]) -> (f64, Ser, [usize; 4]) {
    let (mut exact, mut gold_total, mut missing, mut spurious, mut wrong) = (0, 0, 0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let mut turn_ok = true;
        for (gk, gv) in g.slots() {
            gold_total += 1;
            let mut found = None;
            for (pk, pv) in p.slots() {
                if fold(pk) == fold(gk) {
                    found = Some(pv);
                }
            }
            match found {
                None => {
                    missing += 1;
                    turn_ok = false;
                }
                Some(pv) if fold(pv) != fold(gv) => {
                    wrong += 1;
                    turn_ok = false;
                }
                Some(_) => {}
            }
        }
        for (pk, _) in p.slots() {
            let mut in_gold = false;
            for (gk, _) in g.slots() {
                in_gold |= fold(pk) == fold(gk);
            }
            if !in_gold {
                spurious += 1;
                turn_ok = false;
            }
        }
        if turn_ok {
            exact += 1;
        }
    }
    let jga = if preds.is_empty() { 0.0 } else { exact as f64 / preds.len() as f64 };
    let errors = missing + spurious + wrong;
    let ser = if gold_total > 0 {
        Ser::Value(errors as f64 / gold_total as f64)
    } else if spurious == 0 {
        Ser::Value(0.0)
    } else {
        Ser::Undefined
    };
    (jga, ser, [gold_total, missing, spurious, wrong])
}

fn random_state(rng: &mut ChaCha8Rng) -> DialogueState {
    const KEYS: [&str; 5] = ["hotel-area", "hotel-stars", "food-type", "taxi-day", "food-area"];
    const VALUES: [&str; 6] = ["north", "North ", "4", " thai", "east", "two  words"];
    let mut slots = Vec::new();
    for k in KEYS {
        if rng.gen_bool(0.4) {
            let key = if rng.gen_bool(0.2) { k.to_uppercase() } else { k.to_string() };
            slots.push((key, VALUES[rng.gen_range(0..VALUES.len())].to_string()));
        }
    }
    DialogueState::repaired(Vec::new(), slots)
}

fn state(slots: &[(&str, &str)]) -> DialogueState {
    DialogueState::repaired(Vec::new(), slots.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
}

fn c5_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let none = AliasTable::default();
    for case in 0..C5_CORPORA {
        let n = rng.gen_range(1..8);
        let golds: Vec<DialogueState> = (0..n).map(|_| random_state(&mut rng)).collect();
        let preds: Vec<DialogueState> = golds.iter().map(|g| if rng.gen_bool(0.4) { g.clone() } else { random_state(&mut rng) }).collect();
        let (jga, ser, _) = oracle_metrics(&preds, &golds);
        let got_jga = joint_goal_accuracy(&preds, &golds, &none).map_err(|e| e.to_string())?;
        let got_ser = slot_error_rate(&preds, &golds, &none).map_err(|e| e.to_string())?;
        ensure(got_jga == jga, || format!("corpus {case}: JGA {got_jga} vs oracle {jga}"))?;
        ensure(got_ser == ser, || format!("corpus {case}: SER {got_ser:?} vs oracle {ser:?}"))?;
        let pairs: Vec<_> = preds.iter().zip(&golds).map(|(p, g)| (canonicalize(p, &none), canonicalize(g, &none))).collect();
        let c = report_from_pairs(&pairs, 1).counts;
        ensure(c.correct + c.missing + c.wrong_value == c.gold_slots, || format!("corpus {case}: accounting identity broken {c:?}"))?;
    }

    // Hand-built corpus: exact, wrong value (case-folded key match), missing, empty, spurious,
    // reordered with key case change.
    let golds = vec![
        state(&[("hotel-area", "north")]),
        state(&[("hotel-area", "north"), ("hotel-stars", "4")]),
        state(&[("hotel-area", "north"), ("hotel-stars", "4")]),
        state(&[]),
        state(&[("food-type", "thai")]),
        state(&[("food-type", "thai"), ("food-area", "east")]),
    ];
    let preds = vec![
        state(&[("hotel-area", "north")]),
        state(&[("hotel-area", " North"), ("hotel-stars", "5")]),
        state(&[("hotel-area", "north")]),
        state(&[]),
        state(&[("food-type", "thai"), ("food-price", "cheap")]),
        state(&[("food-area", "east"), ("Food-Type", "THAI")]),
    ];
    const PINNED_JGA: f64 = 0.5;
    const PINNED_SER: f64 = 0.375;
    let (ojga, oser, _) = oracle_metrics(&preds, &golds);
    ensure(ojga == PINNED_JGA && oser == Ser::Value(PINNED_SER), || format!("oracle disagrees with pinned values: {ojga} {oser:?}"))?;
    let jga = joint_goal_accuracy(&preds, &golds, &none).map_err(|e| e.to_string())?;
    let ser = slot_error_rate(&preds, &golds, &none).map_err(|e| e.to_string())?;
    ensure(jga == PINNED_JGA, || format!("hand-built JGA {jga}"))?;
    ensure(ser == Ser::Value(PINNED_SER), || format!("hand-built SER {ser:?}"))?;
    let pairs: Vec<_> = preds.iter().zip(&golds).map(|(p, g)| (canonicalize(p, &none), canonicalize(g, &none))).collect();
    let report = report_from_pairs(&pairs, 1);
    let c = &report.counts;
    ensure((c.gold_slots, c.correct, c.missing, c.spurious, c.wrong_value) == (8, 6, 1, 1, 1), || format!("hand-built counts {c:?}"))?;
    ensure(report.per_domain["hotel"].jga == 1.0 / 3.0 && report.per_domain["food"].jga == 0.5, || "per-domain JGA".into())?;
    Ok(format!("{C5_CORPORA} random corpora exact vs oracle; hand-built JGA {jga} SER {ser}; identity holds"))
}

// ---------------------------------------------------------------- 8: robustness

fn fuzz_output(rng: &mut ChaCha8Rng, valid: &str) -> String {
    let noise: Vec<char> = "{}[]\":,\\ ae-é\n".chars().collect();
    let mut c: Vec<char> = valid.chars().collect();
    match rng.gen_range(0..5) {
        0 => c.truncate(rng.gen_range(0..=c.len())),
        1 => {
            for _ in 0..rng.gen_range(1..6) {
                let i = rng.gen_range(0..=c.len());
                c.insert(i, noise[rng.gen_range(0..noise.len())]);
            }
        }
        2 => {
            for _ in 0..rng.gen_range(1..6) {
                if !c.is_empty() {
                    c.remove(rng.gen_range(0..c.len()));
                }
            }
        }
        3 => {
            let extra: String = (0..rng.gen_range(0..80)).map(|_| noise[rng.gen_range(0..noise.len())]).collect();
            c.extend(extra.chars());
        }
        _ => {
            let i = rng.gen_range(0..=c.len());
            c.truncate(i);
            c.extend("}}}}\"]".chars().take(rng.gen_range(0..6)));
        }
    }
    c.into_iter().collect()
}

fn c8_robustness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let corpus = generate_synthetic(&SynthSpec { n_dialogues: 40, ..SynthSpec::default() }).map_err(|e| e.to_string())?;
    let turns: Vec<_> = corpus.dialogues.iter().flat_map(|d| d.turns.iter()).collect();
    let (mut parsed, mut fell_back) = (0, 0);
    let mut done = 0;
    while done < C8_OUTPUTS {
        let mut previous: Option<TurnPrediction> = None;
        for turn_id in 0..3 {
            let t = turns[rng.gen_range(0..turns.len())];
            let head = format!("{{\"dialogue_history\": {}, \"current_turn\": \"", json_string("USER: hi AGENT: ok"));
            let quoted = json_string(&t.user_transcript);
            let tail = format!("{}\", {}}}", &quoted[1..quoted.len() - 1], serialize_state(&t.state));
            let continuation = fuzz_output(&mut rng, &tail);
            let full = format!("{head}{continuation}");
            let full = if rng.gen_bool(0.1) { fuzz_output(&mut rng, &full) } else { full };
            let pred = catch_unwind(AssertUnwindSafe(|| interpret_output(turn_id, &full, &continuation, true, previous.as_ref())))
                .map_err(|_| format!("panic on output {full:?}"))?;
            ensure(pred.turn_id == turn_id, || "turn id misaligned".into())?;
            pred.state.validate().map_err(|e| format!("invalid state from {full:?}: {e}"))?;
            if full == format!("{head}{tail}") {
                ensure(pred.parse_ok && pred.state == t.state, || format!("intact output not parsed: {full:?}"))?;
            }
            if pred.parse_ok {
                parsed += 1;
            } else {
                fell_back += 1;
                ensure(pred.state == fallback_state(previous.as_ref()), || "fallback state differs from previous turn".into())?;
            }
            let line = PredictionLine::new("d", &pred, None);
            let text = serde_json::to_string(&line).map_err(|e| e.to_string())?;
            let back: PredictionLine = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            ensure(back.prediction().map_err(|e| e.to_string())?.state == pred.state, || "prediction line round trip".into())?;
            previous = Some(pred);
            done += 1;
        }
    }
    ensure(parsed > 0 && fell_back > 0, || format!("degenerate fuzzing: {parsed} parsed, {fell_back} fell back"))?;
    Ok(format!("{done} fuzzed outputs: {parsed} parsed, {fell_back} fell back, 0 crashes"))
}

// ---------------------------------------------------------------- 9: determinism

fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = tiny_model_config();
    cfg.synth.n_dialogues = 6;
    for st in [&mut cfg.lm_pretrain, &mut cfg.stage1, &mut cfg.stage2] {
        st.max_steps = Some(12);
        st.eval_interval = 6;
        st.warmup_steps = 3;
        st.batch_size = 4;
    }
    cfg.stage2.lora = Some(LoraConfig::with_rank(4));
    cfg.max_new_tokens = 48;
    cfg
}

fn tiny_splits(cfg: &RunConfig) -> Result<SyntheticSplits, String> {
    pipeline::synthetic_splits(&cfg.synth, &SplitSizes { lm_text: 12, lm_dev: 3, asr_train: 6, asr_dev: 3, dev: 3, test: 4 }).map_err(|e| e.to_string())
}

fn report_hash(cfg: &RunConfig) -> Result<(String, String), String> {
    let splits = tiny_splits(cfg)?;
    let out = pipeline::run_full::<f32>(cfg, &splits, None, &splits.test).map_err(|e| e.to_string())?;
    let json = out.report.to_json();
    let fuzzy = out.report_fuzzy.to_json();
    Ok((hex(&Sha256::digest(format!("{json}\n{fuzzy}").as_bytes())), json))
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn c9_determinism() -> Check {
    let cfg = tiny_run_config();
    let (a, json) = report_hash(&cfg)?;
    let (b, _) = report_hash(&cfg)?;
    ensure(a == b, || format!("report hashes differ: {a} vs {b}"))?;
    ensure(json.contains(&cfg.hash()), || "report does not embed the config hash".into())?;
    Ok(format!("two full runs, report sha256 {}", &a[..16]))
}

const C6_TRAIN_DIALOGUES: usize = 50;
const C6_ASR_UTTERANCES: usize = 200;
const C6_MIN_JGA: f64 = 0.90;
const C6_MAX_SECONDS: f64 = 900.0;
const C7_SEEDS: [u64; 3] = [11, 12, 13];
const C7_TRAIN_DIALOGUES: usize = 150;
const C7_DEV_DIALOGUES: usize = 60;
const C7_STEPS: usize = 200;

static PRETRAINED: OnceLock<Result<(SpeechDstModel<f32>, f64), String>> = OnceLock::new();
static ALIGNED: OnceLock<Result<SpeechDstModel<f32>, String>> = OnceLock::new();

/// LM pretrained on synthetic text, standing in for an off-the-shelf pretrained LM.
fn pretrained() -> Result<(SpeechDstModel<f32>, f64), String> {
    PRETRAINED
        .get_or_init(|| {
            let t = Instant::now();
            let cfg = RunConfig::default();
            let splits = pipeline::synthetic_splits(&cfg.synth, &SplitSizes::default()).map_err(|e| e.to_string())?;
            let (model, _) = pipeline::pretrained_model::<f32>(&cfg, &splits.lm_text, &splits.lm_dev).map_err(|e| e.to_string())?;
            Ok((model, t.elapsed().as_secs_f64()))
        })
        .clone()
}

/// Stage 1 on 200 utterances until dev CE stops improving.
fn aligned() -> Result<SpeechDstModel<f32>, String> {
    ALIGNED
        .get_or_init(|| {
            let (mut model, _) = pretrained()?;
            let cfg = RunConfig::default();
            let splits = pipeline::synthetic_splits(&cfg.synth, &SplitSizes::default()).map_err(|e| e.to_string())?;
            pipeline::asr_stage(&mut model, &cfg, &splits.asr_train, &splits.asr_dev, Some(C6_ASR_UTTERANCES)).map_err(|e| e.to_string())?;
            Ok(model)
        })
        .clone()
}

fn dev_jga(model: &SpeechDstModel<f32>, cfg: &RunConfig, corpus: &speechdst::data::DialogueCorpus, hmode: HistoryMode) -> Result<f64, String> {
    let lines = pipeline::decode(model, corpus, hmode, cfg).map_err(|e| e.to_string())?;
    let ontology = derive_ontology(corpus);
    Ok(pipeline::score(&lines, corpus, &ontology, false, cfg).map_err(|e| e.to_string())?.jga)
}

fn c6_overfit() -> Check {
    let lm_secs = pretrained()?.1;
    let start = Instant::now();
    let mut model = aligned()?;
    let cfg = RunConfig::default();
    let train = generate_synthetic(&SynthSpec { seed: 7, n_dialogues: C6_TRAIN_DIALOGUES, ..cfg.synth.clone() }).map_err(|e| e.to_string())?;
    let report = pipeline::dst_stage(&mut model, &cfg, &[&train], &[]).map_err(|e| e.to_string())?;
    let jga = dev_jga(&model, &cfg, &train, HistoryMode::default())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(jga >= C6_MIN_JGA, || format!("train JGA {jga:.4} < {C6_MIN_JGA}"))?;
    ensure(secs < C6_MAX_SECONDS, || format!("took {secs:.0}s"))?;
    Ok(format!("train JGA {jga:.4} after {} stage-2 steps on {} turns; stages 1-2 and decoding {secs:.0}s, LM pretraining {lm_secs:.0}s", report.steps, train.num_turns()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c7_orderings() -> Check {
    let base = aligned()?;
    let mut full = Vec::new();
    let mut no_asr = Vec::new();
    let mut conn_only = Vec::new();
    let mut user_only = Vec::new();
    let mut oracle = Vec::new();
    for seed in C7_SEEDS {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.stage2.seed = seed;
        cfg.stage2.max_steps = Some(C7_STEPS);
        let synth = |s: u64, n: usize| generate_synthetic(&SynthSpec { seed: s, n_dialogues: n, ..cfg.synth.clone() }).map_err(|e| e.to_string());
        let train = synth(seed, C7_TRAIN_DIALOGUES)?;
        let dev = synth(seed + 500, C7_DEV_DIALOGUES)?;
        let trained = |model: &mut SpeechDstModel<f32>, cfg: &RunConfig| pipeline::dst_stage(model, cfg, &[&train], &[]).map(|_| ()).map_err(|e| e.to_string());

        let mut m = base.clone();
        trained(&mut m, &cfg)?;
        full.push(dev_jga(&m, &cfg, &dev, HistoryMode::default())?);
        oracle.push(dev_jga(&m, &cfg, &dev, HistoryMode { mode: HistorySource::OracleUser, include_agent: true })?);

        let mut m = base.clone();
        m.reinit_speech_side(seed).map_err(|e| e.to_string())?;
        trained(&mut m, &cfg)?;
        no_asr.push(dev_jga(&m, &cfg, &dev, HistoryMode::default())?);

        let mut c = cfg.clone();
        c.stage2.lora = None;
        let mut m = base.clone();
        trained(&mut m, &c)?;
        conn_only.push(dev_jga(&m, &c, &dev, HistoryMode::default())?);

        let mut c = cfg.clone();
        c.history.include_agent = false;
        let mut m = base.clone();
        trained(&mut m, &c)?;
        user_only.push(dev_jga(&m, &c, &dev, c.history)?);
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "dev JGA full {} no-asr-init {} connector-only {} user-only {} oracle-user {}",
        fmt(&full),
        fmt(&no_asr),
        fmt(&conn_only),
        fmt(&user_only),
        fmt(&oracle)
    );
    let full_m = median(full.clone());
    let mut broken = Vec::new();
    for (tag, holds) in [
        ("(a) asr-init >= no-asr-init", full_m >= median(no_asr)),
        ("(b) lora >= connector-only", full_m >= median(conn_only)),
        ("(c) agent turns >= user-only", full_m >= median(user_only)),
        ("(d) oracle-user >= self-decoded", median(oracle) >= full_m),
    ] {
        if !holds {
            broken.push(tag);
        }
    }
    ensure(broken.is_empty(), || format!("violated {broken:?}; {detail}"))?;
    Ok(detail)
}

#[test]
fn acceptance_suite() {
    let criteria: [(u8, &str, fn() -> Check); 9] = [
        (1, "shape/downsampling", c1_downsampling),
        (2, "LoRA identity, merge, frozen base", c2_lora),
        (3, "loss masking", c3_masking),
        (4, "fuzzy ratio and normalization", c4_fuzzy),
        (5, "metrics oracle", c5_metrics),
        (6, "end-to-end overfit", c6_overfit),
        (7, "qualitative orderings", c7_orderings),
        (8, "robustness to malformed outputs", c8_robustness),
        (9, "determinism", c9_determinism),
    ];
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let outcomes: Vec<Outcome> = criteria.into_iter().filter(|(id, _, _)| only.as_ref().map_or(true, |o| o.contains(id))).map(|(id, name, f)| run(id, name, f)).collect();
    let mut out = std::io::stdout().lock();
    writeln!(out).unwrap();
    for o in &outcomes {
        writeln!(out, "[{}] criterion {} {} ({:.1}s): {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.name, o.elapsed.as_secs_f64(), o.detail).unwrap();
    }
    drop(out);
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
