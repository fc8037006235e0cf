"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also gathered into the pytest terminal summary (see conftest).
"""
import filecmp
import os
import time

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from fdg import cli, clustering, encoder, episodes, evalkit, losses, synthdata, trainer
from fdg.numerics import Rng, finite_diff_grad, log_softmax, max_relative_error

from conftest import blob_dataset, gradcheck_case, perturbed_params, small_config
from test_clustering import brute_force_inertia, separated_blobs
from test_evalkit import brute_force, random_trials

RESULTS = []

# Ordering experiment settings. lambda_dg and the iteration budget were chosen on
# development seeds 0-2; the assertion runs on the held-out seeds below.
ORDERING_SEEDS = (100, 101, 102, 103, 104)
ORDERING_TRAIN = dict(pretrain_iters=1000, main_iters=1500, lambda_dg=0.1)
ORDERING_BUDGET_S = 15 * 60
ORDERING_MIN_GAIN = 0.05


def record(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------------------
# 1. analytic gradients against central differences


def test_gradient_oracle():
    start = time.perf_counter()
    worst = {"proto_loss": 0.0, "dg_loss": 0.0, "combined_loss": 0.0, "angular_proto_loss": 0.0}
    n_cases = 20
    for seed in range(n_cases):
        ds, agg, ep_agg, ep_mm = gradcheck_case(seed)
        specifics = [perturbed_params(small_config(), 100 + 2 * seed + j) for j in range(2)]
        theta = agg.to_vector()

        def check(name, fn, analytic):
            numeric = finite_diff_grad(lambda v: fn(agg.from_vector(v)), theta, h=1e-5)
            worst[name] = max(worst[name], max_relative_error(analytic, numeric))

        out = losses.proto_loss(agg, ep_agg, ds)
        check("proto_loss", lambda p: losses.proto_loss(p, ep_agg, ds).value, out.grads["agg"].to_vector())

        spec = specifics[ep_mm.domain_j]
        out = losses.dg_loss(agg, spec, ep_mm, ds)
        check("dg_loss", lambda p: losses.dg_loss(p, spec, ep_mm, ds).value, out.grads["agg"].to_vector())

        out = losses.combined_loss(agg, specifics, ep_agg, ep_mm, ds, 0.8)
        check("combined_loss", lambda p: losses.combined_loss(p, specifics, ep_agg, ep_mm, ds, 0.8).value,
              out.grads["agg"].to_vector())

        head = losses.AngularHead(1.0 + seed % 3, -0.5)
        out = losses.angular_proto_loss(agg, ep_agg, ds, head)
        check("angular_proto_loss", lambda p: losses.angular_proto_loss(p, ep_agg, ds, head).value,
              out.grads["agg"].to_vector())
        numeric_head = finite_diff_grad(
            lambda wb: losses.angular_proto_loss(agg, ep_agg, ds, losses.AngularHead(wb[0], wb[1])).value,
            [head.w, head.b])
        worst["angular_proto_loss"] = max(worst["angular_proto_loss"], max_relative_error(
            [out.grads["head"]["w"], out.grads["head"]["b"]], numeric_head))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(1, ok, f"max relative error over {n_cases} episodes each: {detail}; {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 2. only the aggregation network receives gradient from the mismatch loss


def test_gradient_isolation(tmp_path):
    zero_grads = True
    for seed in range(20):
        ds, agg, _, ep_mm = gradcheck_case(seed)
        out = losses.dg_loss(agg, perturbed_params(small_config(), seed + 7), ep_mm, ds)
        zero_grads &= all(not g.any() for g in out.grads["specific"].tensors.values())

    ds = blob_dataset(n_speakers=5, n_domains=2, per_domain=5, seed=1)
    config = trainer.TrainConfig(ways=3, shots=2, queries=2, conv_layers=((4, 3), (4, 3)), embed_dim=4,
                                 pretrain_iters=5, main_iters=500, n_domains=2, lr=0.01)
    before, changed, compared = {}, [], [0]

    def snapshot(state):
        blobs = []
        for j, learner in enumerate(state.specifics):
            path = tmp_path / f"specific_{j}.ckpt"
            encoder.save_checkpoint(learner.params, path)
            blobs.append(path.read_bytes())
        return blobs

    def hook(stage, it, state):
        if stage == "specific":
            before[it] = snapshot(state)
        else:
            compared[0] += 1
            if snapshot(state) != before.pop(it):
                changed.append(it)

    result = trainer.train(ds, config, "original-labels", hook=hook)
    moved = not result.state.specifics[0].params.equal(result.state.agg.params)
    ok = zero_grads and not changed and compared[0] == 500 and moved
    assert record(2, ok, f"specific-network gradients of dg_loss all zero: {zero_grads}; "
                         f"specific checkpoints changed by {len(changed)} of {compared[0]} aggregation steps")


# ---------------------------------------------------------------------------
# 3. metrics against threshold enumeration


def test_metric_oracle():
    mismatches = 0
    for seed in range(100):
        scores, labels = random_trials(seed, 200)
        report = evalkit.compute_metrics(scores, labels)
        taus, far, frr, eer, dcf = brute_force(scores, labels)
        same = (np.array_equal(report.thresholds, taus) and np.array_equal(report.far, far)
                and np.array_equal(report.frr, frr) and report.eer == eer and report.min_dcf == dcf)
        mismatches += not same
    r = Rng(2024).generator
    chance = evalkit.compute_metrics(r.normal(size=10_000), r.random(10_000) < 0.5).eer
    perfect = evalkit.compute_metrics([2.0, 3.0, 0.0, 1.0], [True, True, False, False])
    ok = mismatches == 0 and abs(chance - 0.5) <= 0.02 and perfect.eer == 0 and perfect.min_dcf == 0
    assert record(3, ok, f"{mismatches}/100 oracle mismatches; same-distribution EER {chance:.4f} "
                         f"(0.5 +- 0.02); perfect separation EER {perfect.eer:g}, MinDCF {perfect.min_dcf:g}")


# ---------------------------------------------------------------------------
# 4. clustering


def test_clustering():
    monotone, runs = True, 0
    aris = []
    for seed in range(10):
        pts, truth = separated_blobs(seed)
        model = clustering.kmeans(pts, 4, Rng(seed))
        aris.append(adjusted_rand_score(truth, model.predict(pts)))
        for k in (2, 3, 5):
            noise = np.random.default_rng(seed).normal(size=(150, 4))
            hist = clustering.kmeans(noise, k, Rng(seed * 10 + k)).inertia_history
            monotone &= all(b <= a for a, b in zip(hist, hist[1:]))
            runs += 1
        hist = model.inertia_history
        monotone &= all(b <= a for a, b in zip(hist, hist[1:]))
        runs += 1
    pts = np.array([[0.0], [0.1], [10.0], [10.1]])
    model = clustering.kmeans(pts, 2, Rng(0))
    optimum = brute_force_inertia(model.standardize(pts), 2)
    fixture = abs(model.inertia_history[-1] - optimum) <= 1e-12 * max(optimum, 1e-300)
    ok = monotone and min(aris) == 1.0 and fixture
    assert record(4, ok, f"inertia monotone on all {runs} runs: {monotone}; ARI min over 10 seeds {min(aris):.3f}; "
                         f"1-D fixture inertia {model.inertia_history[-1]:.6g} vs optimum {optimum:.6g}")


# ---------------------------------------------------------------------------
# 5. episode invariants


def test_episode_invariants():
    ds = blob_dataset(n_speakers=8, n_domains=3, per_domain=10, frames=4)
    rng = Rng(5)
    counts = {}
    for kind in ("aggregation", "specific", "mismatch"):
        bad = 0
        for i in range(1000):
            if kind == "aggregation":
                ep = episodes.sample_aggregation(ds, 5, 5, 5, rng)
            elif kind == "specific":
                ep = episodes.sample_specific(ds, i % 3, 5, 5, 5, rng)
            else:
                ep = episodes.sample_mismatch(ds, 3, 5, 5, 5, rng)
            problems = episodes.episode_violations(ep, ds)
            if kind == "mismatch" and ep.domain_j == ep.domain_u:
                problems.append("j == u")
            bad += bool(problems)
        counts[kind] = bad
    ok = sum(counts.values()) == 0
    assert record(5, ok, "violations in 1000 draws: " + ", ".join(f"{k} {v}" for k, v in counts.items()))


# ---------------------------------------------------------------------------
# 6. ordering experiment on the default synthetic data


def _out_domain_eer(params, synth):
    eers = []
    for d in synth.domain_group("out"):
        trials = evalkit.build_trials(*synth.eval_split(d))
        scores = evalkit.score_trials(params, synth.dataset, trials)
        eers.append(evalkit.compute_metrics(scores, trials.is_target).eer)
    return float(np.mean(eers))


@pytest.mark.slow
def test_ordering_experiment():
    start = time.perf_counter()
    rows = []
    for seed in ORDERING_SEEDS:
        synth = synthdata.generate(synthdata.GenConfig(seed=seed))
        config = trainer.TrainConfig(seed=seed, **ORDERING_TRAIN)
        eer = {}
        for mode in ("protonet-baseline", "full"):
            result = trainer.train(synth.train_set(), config, mode)
            eer[mode] = _out_domain_eer(result.state.agg.params, synth)
        rows.append(eer)
        print(f"seed {seed}: out-domain EER baseline {eer['protonet-baseline']:.4f}, full {eer['full']:.4f}")
    elapsed = time.perf_counter() - start
    base = np.mean([r["protonet-baseline"] for r in rows])
    full = np.mean([r["full"] for r in rows])
    gains = [(r["protonet-baseline"] - r["full"]) / r["protonet-baseline"] for r in rows]
    gain = float(np.mean(gains))
    ok = full < base and gain >= ORDERING_MIN_GAIN and elapsed < ORDERING_BUDGET_S
    assert record(6, ok, f"mean out-domain EER full {full:.4f} vs protonet-baseline {base:.4f} over "
                         f"{len(rows)} seeds; mean relative improvement {100 * gain:.1f}% (>= 5%); "
                         f"{elapsed:.0f}s (< 900s)")


# ---------------------------------------------------------------------------
# 7. end-to-end determinism


def test_end_to_end_determinism(tmp_path):
    sets = ["--set", "gen.train_speakers=12", "--set", "gen.test_speakers=4", "--set", "gen.utts_per_speaker=20",
            "--set", "gen.enroll_utts=3", "--set", "gen.test_utts=8", "--set", "gen.frames=20",
            "--set", "train.pretrain_iters=30", "--set", "train.main_iters=20",
            "--set", "train.ways=3", "--set", "train.shots=3", "--set", "train.queries=2",
            "--set", "train.n_domains=2", "--set", "train.conv_layers=[[8, 3], [8, 3]]", "--set", "train.embed_dim=8"]
    roots = []
    for rep in ("first", "second"):
        root = tmp_path / rep
        root.mkdir()
        data = str(root / "data.fdgd")
        codes = [cli.main(["gen", "--out", data] + sets),
                 cli.main(["train", "--data", data, "--out-dir", str(root / "run")] + sets),
                 cli.main(["eval", "--data", data, "--checkpoint", str(root / "run" / "agg_final.ckpt"),
                           "--out-dir", str(root / "eval")] + sets)]
        assert codes == [0, 0, 0]
        roots.append(root)
    compared, differing = 0, []
    for rel in ("data.fdgd",) + tuple(f"run/{n}" for n in sorted(os.listdir(roots[0] / "run"))) + \
            tuple(f"eval/{n}" for n in sorted(os.listdir(roots[0] / "eval"))):
        compared += 1
        if not filecmp.cmp(roots[0] / rel, roots[1] / rel, shallow=False):
            differing.append(rel)
    checkpoints = len([n for n in os.listdir(roots[0] / "run") if n.endswith(".ckpt")])
    rocs = len([n for n in os.listdir(roots[0] / "eval") if n.startswith("roc_")])
    ok = not differing and checkpoints >= 4 and rocs == 7
    assert record(7, ok, f"{compared} output files ({checkpoints} checkpoints, {rocs} ROC files, reports) "
                         f"compared, {len(differing)} differ")


# ---------------------------------------------------------------------------
# 8. softmax and prototype identities


def test_softmax_and_prototype_identities():
    r = np.random.default_rng(8)
    worst_norm = worst_perm = worst_shift = worst_mean = 0.0
    for _ in range(200):
        n_cls, n_q, dim = int(r.integers(2, 8)), int(r.integers(1, 10)), int(r.integers(1, 6))
        support = r.normal(size=(n_cls, dim)) * r.uniform(0.1, 5)
        query = r.normal(size=(n_q, dim)) * r.uniform(0.1, 5)
        labels = r.integers(0, n_cls, n_q)
        loss, _, _, _, probs = losses.prototype_cross_entropy(support, np.arange(n_cls), query, labels, n_cls)
        worst_norm = max(worst_norm, float(np.max(np.abs(probs.sum(axis=1) - 1))))
        perm = r.permutation(n_cls)
        inverse = np.argsort(perm)
        permuted = losses.prototype_cross_entropy(support[perm], np.arange(n_cls), query, inverse[labels], n_cls)[0]
        worst_perm = max(worst_perm, abs(loss - permuted))
        dist = r.uniform(0, 50, size=(n_q, n_cls))
        shifted = np.exp(log_softmax(-(dist + r.uniform(-100, 100))))
        worst_shift = max(worst_shift, float(np.max(np.abs(shifted - np.exp(log_softmax(-dist))))))
        emb = r.normal(size=(n_cls * 3, dim))
        emb_labels = np.tile(np.arange(n_cls), 3)
        centers, counts = losses.prototypes_from_embeddings(emb, emb_labels, n_cls)
        expected = np.array([emb[emb_labels == k].mean(axis=0) for k in range(n_cls)])
        worst_mean = max(worst_mean, float(np.max(np.abs(centers - expected))))
    centers, _ = losses.prototypes_from_embeddings(np.array([[0.0, 0.0], [2.0, 4.0]]), [0, 0], 1)
    fixtures = np.array_equal(centers, [[1.0, 2.0]])
    ok = worst_norm <= 1e-12 and worst_perm <= 1e-12 and worst_shift <= 1e-12 and worst_mean <= 1e-12 and fixtures
    assert record(8, ok, f"normalization {worst_norm:.1e}, permutation {worst_perm:.1e}, shift {worst_shift:.1e}, "
                         f"prototype mean {worst_mean:.1e} (all <= 1e-12); fixture {fixtures}")

