"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a one-line ``detail`` with the measured values; the
terminal summary (see conftest.py) prints one PASS/FAIL line per criterion.
"""

import itertools
import json
import os
import time

import numpy as np

from infantmotion import autodiff as ad
from infantmotion import cnn, loso, report, synth
from infantmotion.core import MOVEMENT, POSTURE, ClassSet
from infantmotion.features import channel_features, magnitude_spectrum
from infantmotion.iar import iar_refine
from infantmotion.loso import RunConfig
from infantmotion.metrics import cohen_kappa, confusion, fleiss_kappa, mann_whitney, summary_metrics
from oracles import check_layer, enumerate_mann_whitney_p, naive_features


def _detail(record_property, text):
    record_property("detail", text)
    print(text)


# --- 1: metric oracles --------------------------------------------------------


def test_criterion_1_metric_oracles(record_property):
    t0 = time.perf_counter()
    fleiss = fleiss_kappa(np.array([[2, 1], [0, 3]]))
    cohen = cohen_kappa(list("AABB"), list("ABAB"))
    rng = np.random.default_rng(0)
    uars = {}
    for C in (5, 7):
        cs = ClassSet("toy", tuple(f"c{i}" for i in range(C)))
        truth = np.repeat(np.arange(C), 100_000 // C + 1)[:100_000]
        pred = rng.integers(0, C, 100_000)
        uars[C] = summary_metrics(confusion(pred, truth, cs)).uar
    elapsed = time.perf_counter() - t0
    ok = (
        abs(fleiss - 0.25) < 1e-12
        and abs(cohen) < 1e-12
        and all(abs(u - 1 / C) <= 0.02 for C, u in uars.items())
        and elapsed < 10
    )
    _detail(record_property, f"fleiss={fleiss:.6f} cohen={cohen:.6f} uar5={uars[5]:.4f} uar7={uars[7]:.4f} "
                             f"time={elapsed:.2f}s")
    assert ok


# --- 2: IAR exactness ---------------------------------------------------------


def test_criterion_2_iar_support_and_unanimity(record_property):
    sc = synth.Scenario(duration_s=180.0, annotator_noise=synth.AnnotatorNoise(confusion_rate=0.2))
    prepared = [loso.prepare(s) for s in synth.make_dataset(sc, 4, seed=21)]
    cfg = RunConfig(svm_epochs=5)
    violations = {"support": 0, "unanimous": 0}
    checked = {"frames": 0, "unanimous": 0, "iterations": 0}

    def check(state):
        checked["iterations"] += 1
        for p0, pi in zip(state.originals, state.labels):
            violations["support"] += int(np.sum((pi > 0) & (p0 == 0)))
            unanimous = np.isclose(p0.max(axis=1), 1.0) & (p0.sum(axis=1) > 0)
            violations["unanimous"] += int(np.sum(np.any(pi[unanimous] != p0[unanimous], axis=1)))
            checked["frames"] += len(p0)
            checked["unanimous"] += int(unanimous.sum())

    for track in ("posture", "movement"):
        fp = loso.likelihood_fn(prepared, track, cfg, None)
        iar_refine([p.priors[track] for p in prepared], fp, 5, seed=3, on_iteration=check)
    _detail(record_property, f"iterations={checked['iterations']} frames={checked['frames']} "
                             f"unanimous={checked['unanimous']} violations={violations}")
    assert checked["iterations"] == 2 * 6
    assert violations == {"support": 0, "unanimous": 0}


# --- 3: IAR benefit -----------------------------------------------------------


def test_criterion_3_iar_beats_majority_vote(record_property):
    sc = synth.Scenario(duration_s=300.0, annotator_noise=synth.AnnotatorNoise(confusion_rate=0.2))
    cfg = RunConfig(svm_epochs=10)
    wins = {"posture": 0, "movement": 0}
    rows = []
    for seed in range(5):
        prepared = [loso.prepare(s) for s in synth.make_dataset(sc, 6, seed=seed)]
        for track in ("posture", "movement"):
            fp = loso.likelihood_fn(prepared, track, cfg, None)
            state = iar_refine([p.priors[track] for p in prepared], fp, 5, seed=seed)
            hit_refined = hit_majority = n = 0
            for p, refined in zip(prepared, state.labels):
                m = p.usable & (p.priors[track].sum(axis=1) > 0) & (p.truth[track] >= 0)
                truth = p.truth[track][m]
                hit_refined += int(np.sum(np.argmax(refined[m], axis=1) == truth))
                hit_majority += int(np.sum(np.argmax(p.priors[track][m], axis=1) == truth))
                n += int(m.sum())
            wins[track] += hit_refined >= hit_majority
            rows.append(f"{track[0]}{seed}:{hit_majority / n:.3f}->{hit_refined / n:.3f}")
    _detail(record_property, f"wins={wins} " + " ".join(rows))
    assert wins["posture"] >= 4 and wins["movement"] >= 4


# --- 4: gradient check --------------------------------------------------------


def test_criterion_4_gradient_check(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    relu_in = rng.normal(size=(6, 5))
    relu_in[np.abs(relu_in) < 1e-2] = 0.5
    a3 = rng.normal(size=(3, 2, 4))
    q = rng.dirichlet(np.ones(4), size=6)
    mask = np.array([1, 1, 0, 1, 1, 1], dtype=bool)
    layers = {
        "dense": (ad.dense, [rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)]),
        "conv2d": (lambda x, W, b: ad.conv2d(x, W, b, (1, 2)),
                   [rng.normal(size=(2, 1, 6, 13)), rng.normal(size=(3, 1, 3, 5)), rng.normal(size=3)]),
        "relu": (ad.relu, [relu_in]),
        "identity": (ad.identity, [rng.normal(size=(4, 3))]),
        "add": (ad.add, [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [a3, rng.normal(size=(3, 1, 4))]),
        "reshape": (lambda a: ad.reshape(a, (6, 4)), [a3]),
        "mean_pool": (lambda a: ad.mean_pool(a, (1, 2)), [a3]),
        "softmax_cross_entropy": (lambda z: ad.softmax_cross_entropy(z, q, mask), [rng.normal(size=(6, 4))]),
    }
    for d in (1, 2, 4, 8):
        layers[f"dilated_conv1d_d{d}"] = (
            lambda x, W, b, d=d: ad.dilated_conv1d(x, W, b, d),
            [rng.normal(size=(20, 4)), rng.normal(size=(3, 4, 3)), rng.normal(size=3)],
        )
    errors = {name: check_layer(fn, inputs, rng) for name, (fn, inputs) in layers.items()}

    nets = {}
    for name, mcfg, cond in (
        ("posture_net", cnn.ModelConfig(n_classes=POSTURE.C), False),
        ("movement_net", cnn.ModelConfig(n_classes=MOVEMENT.C, condition_dim=POSTURE.C), True),
    ):
        net = cnn.build_model(mcfg, seed=0)
        F = 8
        item = cnn.TrainItem(
            rng.normal(size=(F, 24, 120)),
            rng.dirichlet(np.ones(mcfg.n_classes), size=F),
            np.ones(F, dtype=bool),
            cnn.one_hot(rng.integers(0, POSTURE.C, F), POSTURE.C) if cond else None,
        )
        res = cnn.gradient_check(net, item, max_entries=16, seed=0)
        nets[name] = res
        errors[name] = res.max_error
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    probes = sum(r.probed for r in nets.values())
    skipped = sum(r.skipped for r in nets.values())
    _detail(record_property, f"layers={len(layers)} worst={worst}:{errors[worst]:.2e} "
                             f"net_probes={probes} kink_skips={skipped} time={elapsed:.1f}s")
    assert all(e < 1e-4 for e in errors.values())
    assert skipped < probes / 4
    assert elapsed < 60


# --- 5: end-to-end LOSO ---------------------------------------------------------


def test_criterion_5_end_to_end_loso(record_property):
    t0 = time.perf_counter()
    subjects = synth.make_dataset(synth.Scenario(), 12, seed=0)
    prepared = [loso.prepare(s) for s in subjects]
    jobs = os.cpu_count() or 1
    reports = {c: loso.loso_run(subjects, RunConfig(classifier=c, jobs=jobs), prepared) for c in ("svm", "cnn")}
    elapsed = time.perf_counter() - t0
    uar = {
        (c, t, s): reports[c]["tracks"][t]["subsets"][s]["uar"]
        for c in reports for t in ("posture", "movement") for s in loso.SUBSETS
    }
    diff = loso.compare_reports(reports["cnn"], reports["svm"], "movement")
    cells = " ".join(f"{c}/{t[0]}/{s.split('_')[0]}={v:.3f}" for (c, t, s), v in uar.items())
    _detail(record_property, f"{cells} cnn-svm_movement_uar={diff['uar_diff']:+.3f} "
                             f"(fold U-test p={diff['mann_whitney']['p']:.3f}) time={elapsed / 60:.1f}min")
    for (c, t, s), v in uar.items():
        assert v >= (0.40 if t == "posture" else 0.28), (c, t, s, v)
    assert elapsed < 30 * 60


# --- 6: ablation shape ----------------------------------------------------------


def test_criterion_6_four_sensors_beat_every_single_sensor(record_property):
    sc = synth.Scenario(duration_s=240.0)
    cfg = RunConfig(svm_epochs=10)
    singles = ("left_arm", "right_arm", "left_leg", "right_leg")
    rows = {name: {"posture": [], "movement": []} for name in loso.ABLATION_CONFIGS}
    for seed in range(5):
        out = loso.ablate(synth.make_dataset(sc, 6, seed=1000 + seed), loso.ABLATION_CONFIGS, cfg)
        for name in loso.ABLATION_CONFIGS:
            for track in ("posture", "movement"):
                rows[name][track].append(out["rows"][name][track]["all_frames"])
    means = {name: {t: float(np.mean(v)) for t, v in r.items()} for name, r in rows.items()}
    text = " ".join(f"{n}={m['posture']:.3f}/{m['movement']:.3f}" for n, m in means.items())
    _detail(record_property, f"mean UAR posture/movement over 5 seeds: {text}")
    for track in ("posture", "movement"):
        for name in singles:
            assert means["all"][track] >= means[name][track], (track, name)


# --- 7: harness integrity -------------------------------------------------------


def test_criterion_7_leakage_and_determinism(record_property, tmp_path):
    from dataclasses import replace

    subjects = synth.make_dataset(synth.Scenario(duration_s=180.0), 4, seed=77)
    prepared = [loso.prepare(s) for s in subjects]
    configs = {
        "svm": RunConfig(svm_epochs=5),
        "svm+iar": RunConfig(svm_epochs=5, iar=True, iterations=2),
        "cnn": RunConfig(classifier="cnn", cnn_epochs=1, cnn_chunk_frames=32),
    }
    checked = 0
    leaks = []
    for name, cfg in configs.items():
        for i in range(len(prepared)):
            base = loso.run_fold(prepared, i, cfg)
            rng = np.random.default_rng(i)
            p = prepared[i]
            changed = list(prepared)
            changed[i] = replace(
                p,
                windows=p.windows + rng.normal(size=p.windows.shape),
                features=p.features + rng.normal(size=p.features.shape),
                priors={t: np.roll(v, 1, axis=1) for t, v in p.priors.items()},
            )
            if loso.run_fold(changed, i, cfg).fingerprints != base.fingerprints:
                leaks.append((name, p.subject_id))
            checked += 1

    cfg = RunConfig(svm_epochs=5, iar=True, iterations=2)
    first = report.dumps(loso.loso_run(subjects, cfg, prepared)).encode()
    second = report.dumps(loso.loso_run(subjects, cfg)).encode()

    from infantmotion.cli import main

    synth.write_dataset(tmp_path / "data", subjects)
    for k in range(2):
        assert main(["eval", "--data", str(tmp_path / "data"), "--svm-epochs", "5", "--jobs", "1",
                     "--out", str(tmp_path / f"r{k}")]) == 0
    cli_same = (tmp_path / "r0" / "metrics.json").read_bytes() == (tmp_path / "r1" / "metrics.json").read_bytes()
    _detail(record_property, f"folds_checked={checked} leaks={leaks} api_identical={first == second} "
                             f"cli_identical={cli_same} report_bytes={len(first)}")
    assert not leaks and first == second and cli_same
    assert json.loads(first)["config"] == cfg.to_dict()


# --- 8: features ----------------------------------------------------------------


def test_criterion_8_features_match_naive_loops(record_property):
    rng = np.random.default_rng(8)
    scale = rng.uniform(0.1, 50.0, size=(1000, 1))
    windows = rng.normal(size=(1000, 120)) * scale + rng.normal(0.0, 5.0, size=(1000, 1))
    fast = channel_features(windows)
    worst = 0.0
    for w, row in zip(windows, fast):
        ref = np.asarray(naive_features(w.tolist()))
        # relative error, with the window's own magnitude as the floor for features near zero
        floor = 1e-3 * np.abs(w).max()
        worst = max(worst, float(np.max(np.abs(row - ref) / np.maximum(np.abs(ref), floor))))
    parseval = 0.0
    for w in windows:
        m = magnitude_spectrum(w).magnitudes
        one_sided = (m[0] ** 2 + 2 * np.sum(m[1:-1] ** 2) + m[-1] ** 2) / 128
        parseval = max(parseval, abs(one_sided - np.sum(w**2)) / np.sum(w**2))
    _detail(record_property, f"windows=1000 max_rel_feature_err={worst:.2e} max_rel_parseval_err={parseval:.2e}")
    assert worst < 1e-9 and parseval < 1e-9


# --- 9: statistics --------------------------------------------------------------


def test_criterion_9_exact_mann_whitney(record_property):
    rng = np.random.default_rng(9)
    worst = 0.0
    cases = 0
    for n1, n2 in itertools.product(range(1, 7), repeat=2):
        for tied in (False, True):
            if tied:
                x, y = rng.integers(0, 4, n1).astype(float), rng.integers(0, 4, n2).astype(float)
            else:
                x, y = rng.normal(size=n1), rng.normal(0.7, 1.0, size=n2)
            res = mann_whitney(x, y)
            assert res.method == "exact"
            worst = max(worst, abs(res.p - enumerate_mann_whitney_p(x.tolist(), y.tolist())))
            cases += 1
    toy = mann_whitney([1, 2], [3, 4])
    _detail(record_property, f"size_pairs=36 cases={cases} max_abs_p_diff={worst:.2e} toy_U={toy.U} toy_p={toy.p:.6f}")
    assert worst < 1e-12
    assert toy.U == 0 and abs(toy.p - 1 / 3) < 1e-12
