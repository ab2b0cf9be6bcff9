"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criterion 5 trains three methods on five full-size synthetic cohorts and
takes roughly ten minutes on one CPU core.
"""

import json
import math
import time
from pathlib import Path

import numpy as np

from oracles import naive_metrics
from udama.cli import load_config, main
from udama.datasynth import (
    Cohort,
    Domain,
    InsufficientWear,
    Intensity,
    RawStream,
    SensorWindow,
    assign_fine_labels,
    epoch_features,
    generate_cohorts,
    met_convert,
    nonwear_mask,
    preprocess_stream,
)
from udama.evaluation import compute_metrics, hellinger, hellinger_distance
from udama.losses import (
    LossWeights,
    combined_loss,
    cross_entropy_loss,
    cross_entropy_tape,
    gaussian_nll_loss,
    gaussian_nll_tape,
    mse_tape,
)
from udama.model import (
    EncoderSpec,
    ModelParams,
    coarse_head,
    encode_batch,
    fine_head,
    init_params,
    predict_head,
)
from udama.numerics import Tensor, grad_check
from udama.training import (
    GrlSchedule,
    Method,
    TrainConfig,
    adapt,
    crossvalidate,
    finetune,
    fold_splits,
    inject_source_samples,
    pretrain,
    train_method,
)

ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG = ROOT / "configs" / "desk.json"


def report(capsys, number, title, ok, detail=""):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
    assert ok, detail


def toy_cohorts(n_source=40, n_target=20, T=5, F=3):
    rng = np.random.default_rng(0)
    out = []
    for domain, n, mean in ((Domain.SOURCE, n_source, 45.0), (Domain.TARGET, n_target, 33.0)):
        windows = []
        for i in range(n):
            y = float(rng.normal(mean, 6.0))
            X = rng.normal(size=(T, F)) * 0.3 + (y - 40.0) / 10.0
            windows.append(SensorWindow(f"{domain.value}{i}", X, rng.normal(size=2), y, domain))
        out.append(Cohort(domain.value, domain, windows))
    assign_fine_labels(*out)
    return out


def test_criterion_1_gradient_correctness(capsys):
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(4, 3)))
    W, b = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=2))
    primitives = {
        "affine": lambda t, x: t.sum(t.affine(x, W, b)),
        "sigmoid": lambda t, x: t.sum(t.mul(t.sigmoid(x), w)),
        "tanh": lambda t, x: t.sum(t.mul(t.tanh(x), w)),
        "softplus": lambda t, x: t.sum(t.mul(t.softplus(x), w)),
        "add": lambda t, x: t.sum(t.square(t.add(x, w))),
        "sub": lambda t, x: t.sum(t.square(t.sub(w, x))),
        "mul": lambda t, x: t.sum(t.mul(x, t.mul(x, w))),
        "concat": lambda t, x: t.sum(t.square(t.concat([x, t.scale(x, 2.0)], axis=1))),
        "mean": lambda t, x: t.square(t.mean(t.mul(x, w))),
        "log": lambda t, x: t.sum(t.log(t.add(t.square(x), Tensor(0.5)))),
        "square": lambda t, x: t.sum(t.mul(t.square(x), w)),
    }
    x = Tensor(rng.normal(size=(4, 3)))
    prim_err = {k: grad_check(f, x, 1e-5) for k, f in primitives.items()}

    spec = EncoderSpec(gru_layers=2, hidden_size=3, mlp_sizes=[2], input_features=4, metadata_dim=2,
                       predictor_sizes=[3], disc_sizes=[3, 3])
    params = init_params(spec, np.random.default_rng(1))
    X, M = rng.normal(size=(2, 8, 4)), rng.normal(size=(2, 2))
    y, y_c, y_d = np.array([40.0, 31.0]), np.array([0, 1]), np.array([0.8, -0.6])
    params.set_label_scale(36.0, 6.0)
    weights = LossWeights()

    # finite differences cannot see the reversal, which is checked on its own in the unit tests
    def combined(tape, p):
        emb = encode_batch(tape, p, X, M)
        mse = mse_tape(tape, predict_head(tape, emb, p), y)
        cse = cross_entropy_tape(tape, coarse_head(tape, emb, p), y_c)
        mu, s2 = fine_head(tape, emb, p)
        gll = gaussian_nll_tape(tape, mu, s2, y_d)
        return tape.add(tape.add(tape.scale(mse, weights.alpha), tape.scale(cse, weights.lambda1)),
                        tape.scale(gll, weights.lambda2))

    full_err = 0.0
    for name, t in params.trainable().items():
        f = lambda tape, v, name=name: combined(tape, ModelParams(spec, {**params.tensors, name: v}))
        full_err = max(full_err, grad_check(f, Tensor(t.value.copy()), 1e-5))

    worst_prim = max(prim_err.values())
    ok = worst_prim < 1e-5 and full_err < 1e-4
    report(capsys, 1, "gradient correctness", ok,
           f"worst primitive rel-err {worst_prim:.2e} < 1e-5, full combined loss {full_err:.2e} < 1e-4")


def test_criterion_2_loss_oracles(capsys):
    checks = {
        "CE uniform = ln 2": abs(cross_entropy_loss([[0.0, 0.0]], [1]) - math.log(2)) < 1e-12,
        "GLL(mu=target, var=1) = 0": abs(gaussian_nll_loss([1.3], [1.0], [1.3])) < 1e-12,
        "GLL(0, target 2, var 1) = 2": abs(gaussian_nll_loss([0.0], [1.0], [2.0]) - 2.0) < 1e-12,
        "combined = 1.403426": abs(combined_loss(2.0, math.log(2), 0.5, LossWeights(1.0, 0.5, 0.5)) - 1.403426) < 1e-6,
    }
    failed = [k for k, v in checks.items() if not v]
    report(capsys, 2, "loss oracles", not failed, "failed: " + ", ".join(failed) if failed else "4/4 exact")


def test_criterion_3_metric_oracles(capsys):
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(20))
    ok_self = hellinger(p, p) == 0.0
    ok_disjoint = abs(hellinger_distance([0.0, 0.1], [10.0, 9.9]) - 1.0) < 1e-12
    worst_affine = 0.0
    for _ in range(50):
        a, b = rng.uniform(0.01, 50), rng.uniform(-50, 50)
        xs, ys = rng.normal(size=40), rng.normal(size=40)
        base = compute_metrics(xs, ys)["corr"]
        worst_affine = max(worst_affine, abs(compute_metrics(a * xs + b, ys)["corr"] - base),
                           abs(compute_metrics(xs, a * ys + b)["corr"] - base))
    worst_naive = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 300))
        truth = rng.normal(35, 7, size=n)
        pred = 0.6 * truth + rng.normal(0, 4, size=n)
        got, ref = compute_metrics(pred, truth), naive_metrics(pred.tolist(), truth.tolist())
        worst_naive = max(worst_naive, max(abs(got[k] - ref[k]) for k in ref))
    ok = ok_self and ok_disjoint and worst_affine < 1e-12 and worst_naive < 1e-10
    report(capsys, 3, "metric oracles", ok,
           f"H(p,p)=0 {ok_self}, disjoint H=1 {ok_disjoint}, affine drift {worst_affine:.1e}, "
           f"naive reference diff {worst_naive:.1e}")


def test_criterion_4_path_equivalences(capsys):
    source, target = toy_cohorts()
    spec = EncoderSpec(gru_layers=1, hidden_size=4, mlp_sizes=[3], input_features=3, metadata_dim=2,
                       predictor_sizes=[4], disc_sizes=[4, 4])
    cfg = TrainConfig(model=spec, pretrain_epochs=2, adapt_epochs=3, batch_size=8, lr=1e-2, seed=5,
                      weights=LossWeights(0.01, 1.0, 0.0), injection_fraction=0.2)
    pre = pretrain(source, cfg)
    udama = train_method(Method.UDAMA, source, target.windows, cfg, pre)
    coarse = train_method(Method.COARSE_ONLY, source, target.windows, cfg, pre)
    ok_coarse = udama.equals(coarse)

    tf_cfg = TrainConfig(model=spec, pretrain_epochs=2, adapt_epochs=3, batch_size=8, lr=1e-2, seed=5,
                         weights=LossWeights.regression_only(0.01), grl_schedule=GrlSchedule("constant", 0.0))
    h_a, h_f = [], []
    a = adapt(pre, target.windows, tf_cfg, history=h_a)
    f = finetune(pre, target.windows, tf_cfg, history=h_f)
    shared = [k for k in a.tensors if not k.startswith(("dc.", "df."))]
    ok_tf = all(a[k].value.tobytes() == f[k].value.tobytes() for k in shared) and \
        [h["mse"] for h in h_a] == [h["mse"] for h in h_f]
    report(capsys, 4, "path equivalences", ok_coarse and ok_tf,
           f"UDAMA(1,0)==CoarseOnly bitwise {ok_coarse}; adapt(0,0,grl 0)==TF trajectory bitwise {ok_tf}")


def test_criterion_5_directional_replication(capsys):
    cfg = load_config(str(DESK_CONFIG))
    start = time.perf_counter()
    corr = {m: [] for m in ("Scratch", "TF", "UDAMA")}
    hd = {m: [] for m in corr}
    for seed in range(5):
        seeded = load_config(str(DESK_CONFIG), seed=seed)
        source, target = generate_cohorts(seeded.shift)
        pre = pretrain(source, seeded.train)
        for method in corr:
            r, _ = crossvalidate(target, source, seeded.train, method, pre, cfg.bins)
            corr[method].append(r.corr[0])
            hd[method].append(r.hellinger[0])
    minutes = (time.perf_counter() - start) / 60
    med_c = {m: float(np.median(v)) for m, v in corr.items()}
    med_h = {m: float(np.median(v)) for m, v in hd.items()}
    a = med_c["UDAMA"] >= med_c["TF"] - 0.02
    b = med_c["TF"] >= med_c["Scratch"] + 0.10
    c = med_h["UDAMA"] <= med_h["TF"]
    detail = (
        f"corr UDAMA {med_c['UDAMA']:.3f} >= TF {med_c['TF']:.3f} - 0.02: {a}; "
        f"corr TF {med_c['TF']:.3f} >= Scratch {med_c['Scratch']:.3f} + 0.10: {b}; "
        f"HD UDAMA {med_h['UDAMA']:.3f} <= TF {med_h['TF']:.3f}: {c}; {minutes:.1f} min"
    )
    report(capsys, 5, "directional replication (5 seeds x 3 folds)", a and b and c and minutes <= 15, detail)


def test_criterion_6_protocol_fidelity(capsys):
    rng = np.random.default_rng(6)
    target = Cohort("t", Domain.TARGET, [
        SensorWindow(f"T{i:03d}", np.zeros((1, 26)), np.zeros(4), float(rng.normal(33, 7)), Domain.TARGET)
        for i in range(191)
    ])
    splits = fold_splits(target, TrainConfig(folds=3, test_fraction=0.30))
    by_id = {w.id: w for w in target.windows}
    sizes = [len(s.test_ids) for s in splits]
    target_only = all(by_id[i].domain is Domain.TARGET for s in splits for i in s.test_ids)
    source = [SensorWindow(f"S{i:04d}", np.zeros((1, 26)), np.zeros(4), 45.0, Domain.SOURCE) for i in range(500)]
    augmented = inject_source_samples(source, target.windows[:134], 0.05, seed=0)
    injected = augmented[134:]
    ok = sizes == [57, 57, 57] and target_only and len(injected) == 7 and all(w.y_c == 0 for w in injected)
    report(capsys, 6, "protocol fidelity", ok,
           f"test sizes {sizes}, target-only {target_only}, injected {len(injected)} source samples")


def test_criterion_7_determinism(capsys, tmp_path):
    doc = json.loads(DESK_CONFIG.read_text())
    doc["shift"].update(n_source=40, n_target=20)
    doc["train"].update(pretrain_epochs=1, adapt_epochs=2, batch_size=16)
    doc["train"]["model"].update(hidden_size=4, mlp_sizes=[4], predictor_sizes=[4], disc_sizes=[4, 4])
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(doc))
    codes = [main(["experiment", "--config", str(cfg), "--out", str(tmp_path / run)]) for run in ("a", "b")]
    same = {
        name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for name in ("results.json", "results.csv")
    }
    report(capsys, 7, "determinism of `udama experiment`", codes == [0, 0] and all(same.values()),
           f"exit codes {codes}, byte-identical {same}")


def test_criterion_8_preprocessing_fidelity(capsys):
    def stream(minutes):
        return RawStream(0, np.full(minutes, 75.0), np.full(minutes, 120.0), np.ones(minutes, dtype=bool))

    try:
        preprocess_stream(stream(60 * 60))
        rejected = False
    except InsufficientWear:
        rejected = True
    raw = stream(7 * 1440)
    raw.intensity[:100] = 0.0
    flagged = bool(nonwear_mask(raw.intensity)[:100].all())
    kept, starts = epoch_features(raw)
    excluded = len(kept) == 7 * 96 - 7 and starts[0] >= 100
    mets, cls = met_convert(213.0)
    X, mask_len = preprocess_stream(stream(7 * 1440))
    ok = rejected and flagged and excluded and (mets, cls) == (3.0, Intensity.MVPA) and X.shape == (600, 26)
    report(capsys, 8, "preprocessing fidelity", ok,
           f"60 h rejected {rejected}; 100-min zero run non-wear {flagged}, epochs excluded {excluded}; "
           f"213 J/min/kg -> {mets} METs {cls.name}; window {X.shape}, mask {mask_len}")
