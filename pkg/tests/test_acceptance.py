"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -s`` to see the lines as they happen;
a summary block is printed at the end of any pytest run that includes them.
"""

import csv
import time

import numpy as np
import pytest
from conftest import toy_config
from oracles import avgerr_loop, bad_loop, d1_loop, disparity_loss_loop, recon_loss_loop, rmse_loop

from madis_stereo import analysis, metrics
from madis_stereo.data import stack_batch, synth_generate
from madis_stereo.distillation import (
    DEFAULT_EMA,
    TeacherState,
    ema_update,
    init_teacher,
    make_masks,
    pseudo_labels,
    training_step,
)
from madis_stereo.losses import SupervisionBundle, disparity_loss, recon_loss, total_loss
from madis_stereo.model import DisparityPrediction, MaDisStereo, ModelConfig, PatchMask, sample_mask
from madis_stereo.tensor import Tensor, finite_diff_check
from madis_stereo.trainer import AdamW, TrainConfig, Trainer, ablate, masked_recon_mse

# -- 1 ----------------------------------------------------------------------------------

FD_SEEDS = 20
FD_TENSORS_PER_SEED = 24
# below this magnitude central differences at eps=1e-5 sit in float64 round-off
FD_NOISE_FLOOR = 1e-6


def _fd_objective(model, batch, sup, lm, rm):
    p = model.cfg.patch_size

    def f(_):
        out = model.forward_student(batch["left"], batch["right"], lm, rm)
        return total_loss(
            disparity_loss(out.prediction, sup),
            recon_loss(out.recon_left, batch["left"], lm, p),
            recon_loss(out.recon_right, batch["right"], rm, p),
        )

    return f


def test_criterion_01_gradient_soundness(acceptance):
    start = time.perf_counter()
    names = [n for n, _ in MaDisStereo(toy_config(), 0).named_parameters()]
    order = np.random.default_rng(0).permutation(len(names))
    worst, worst_at, checked, structural_zero = 0.0, None, set(), set()
    for seed in range(FD_SEEDS):
        model = MaDisStereo(toy_config(), seed)
        batch = stack_batch([synth_generate(1000 + seed, 32, 64)])
        teacher = init_teacher(model)
        sup = SupervisionBundle(batch["d_gt"], batch["valid"], pseudo_labels(model, teacher, batch["left"], batch["right"]))
        lm, rm = make_masks(model.cfg.num_patches, 0.4, 1, seed)
        f = _fd_objective(model, batch, sup, lm, rm)
        model.zero_grad()
        f(None).backward()
        params = dict(model.named_parameters())
        rng = np.random.default_rng(seed)
        chunk = [order[(seed * FD_TENSORS_PER_SEED + k) % len(names)] for k in range(FD_TENSORS_PER_SEED)]
        for i in chunk:
            name = names[i]
            p = params[name]
            g = np.abs(p.grad.reshape(-1))
            candidates = np.flatnonzero(g >= FD_NOISE_FLOOR)
            if candidates.size == 0:
                # attention key biases shift every score of a query equally: gradient is identically zero
                assert g.max() < 1e-12, name
                structural_zero.add(name)
                checked.add(name)
                continue
            idx = rng.choice(candidates, size=min(2, candidates.size), replace=False)
            err = finite_diff_check(f, p, 1e-5, idx)
            checked.add(name)
            if err > worst:
                worst, worst_at = err, f"{name} (seed {seed})"
    elapsed = time.perf_counter() - start
    passed = worst < 1e-4 and elapsed < 120 and checked == set(names)
    acceptance(
        1,
        passed,
        f"max rel err {worst:.2e} at {worst_at} over {FD_SEEDS} seeds, {len(checked)}/{len(names)} tensors "
        f"({len(structural_zero)} with identically zero gradient), {elapsed:.0f}s",
    )
    assert passed


# -- 2 ----------------------------------------------------------------------------------


def test_criterion_02_ema_geometric_decay(acceptance):
    worst = 0.0
    for alpha in (0.0, 0.5, 0.9, 0.9999):
        model = MaDisStereo(toy_config(), 1)
        teacher = init_teacher(model, alpha)
        rng = np.random.default_rng(2)
        for p in model.encoder.parameters():
            p.data += rng.normal(size=p.shape)
        theta = np.concatenate([p.data.ravel() for p in model.encoder.parameters()])
        gap0 = np.linalg.norm(np.concatenate([p.data.ravel() for p in teacher.encoder.parameters()]) - theta)
        for k in range(1, 51):
            ema_update(teacher, model.encoder)
            gap = np.linalg.norm(np.concatenate([p.data.ravel() for p in teacher.encoder.parameters()]) - theta)
            worst = max(worst, abs(gap - alpha**k * gap0))
    defaults = (DEFAULT_EMA, TeacherState(model.encoder).alpha, TrainConfig().ema_alpha)
    passed = worst <= 1e-10 and all(a == 0.9999 for a in defaults)
    acceptance(2, passed, f"max |gap - alpha^k gap0| = {worst:.1e}; default alpha {defaults[0]}")
    assert passed


# -- 3 ----------------------------------------------------------------------------------


def test_criterion_03_gating(acceptance):
    rng = np.random.default_rng(3)
    model = MaDisStereo(toy_config(), 3)
    batch = stack_batch([synth_generate(30, 32, 64), synth_generate(31, 32, 64)])
    valid = rng.random(batch["d_gt"].shape) < 0.5
    pgt = rng.uniform(0, 14, batch["d_gt"].shape)

    def loss_and_grads(pseudo):
        model.zero_grad()
        pred = model.predict(batch["left"], batch["right"])
        loss = disparity_loss(pred, SupervisionBundle(batch["d_gt"], valid, pseudo))
        loss.backward()
        return loss.item(), [None if p.grad is None else p.grad.copy() for p in model.parameters()]

    base_loss, base_grads = loss_and_grads(pgt)
    perturbed = np.where(valid, pgt + rng.normal(scale=50.0, size=pgt.shape), pgt)
    loss2, grads2 = loss_and_grads(perturbed)
    same_grads = all((a is None and b is None) or np.array_equal(a, b) for a, b in zip(base_grads, grads2))

    # partition check with sentinel labels: ground truth positive, pseudo labels negative
    sup = SupervisionBundle(np.full(valid.shape, 7.0), valid, np.full(valid.shape, -7.0))
    target, weight = sup.target()
    gt_part, pgt_part = target > 0, target < 0
    partition = (
        np.array_equal(gt_part, valid)
        and not np.any(gt_part & pgt_part)
        and np.all(gt_part | pgt_part)
        and np.all(weight == 1.0)
    )
    passed = loss2 == base_loss and same_grads and partition
    acceptance(3, passed, f"loss delta {abs(loss2 - base_loss):.1e}, grads identical={same_grads}, partition exact={partition}")
    assert passed


# -- 4 ----------------------------------------------------------------------------------


def test_criterion_04_stop_gradient(acceptance):
    identical = True
    for seed in range(3):
        batch = stack_batch([synth_generate(40 + seed, 32, 64), synth_generate(50 + seed, 32, 64)])
        runs = []
        for inject in (False, True):
            model = MaDisStereo(toy_config(), seed)
            teacher = init_teacher(model)
            # give the teacher its own weights so pseudo labels differ from the student prediction
            for p in teacher.encoder.parameters():
                p.data *= 0.9
            override = pseudo_labels(model, teacher, batch["left"], batch["right"]) if inject else None
            training_step(batch, model, teacher, AdamW(model.named_parameters()), 0.4, 1.0, seed=seed, lr=1e-3,
                          pseudo_override=override)
            runs.append([p.grad.copy() for p in model.parameters()])
        identical &= all(np.array_equal(a, b) for a, b in zip(*runs))
    acceptance(4, identical, f"parameter gradients bitwise identical with injected constants: {identical}")
    assert identical


# -- 5 ----------------------------------------------------------------------------------


def test_criterion_05_siamese_sharing(acceptance):
    model = MaDisStereo(toy_config(), 5)
    teacher = init_teacher(model, 0.5)
    batch = stack_batch([synth_generate(60, 32, 64)])
    shared = [p for m in model.shared_modules() for p in m.parameters()]
    t_params = teacher.encoder.parameters()
    # the teacher owns an encoder only, with storage disjoint from the student's
    disjoint = not any(np.shares_memory(t.data, s.data) for t in t_params for s in model.parameters())
    owns_encoder_only = [n for n, _ in teacher.encoder.named_parameters()] == [n for n, _ in model.encoder.named_parameters()]
    # teacher output reads the student's decoder/head storage: an in-place edit shows up
    before = model.forward_teacher(batch["left"], batch["right"], teacher.encoder).d.data
    model.fusion_head.out2.bias.data[0] += 1.0
    after = model.forward_teacher(batch["left"], batch["right"], teacher.encoder).d.data
    reads_shared = np.allclose(after - before, 1.0, atol=1e-12)
    model.fusion_head.out2.bias.data[0] -= 1.0

    ids = [id(p.data) for p in shared]
    snapshot = [p.data.copy() for p in model.parameters()]
    t_before = [p.data.copy() for p in t_params]
    for p in model.encoder.parameters():
        p.data += 1.0
    ema_update(teacher, model.encoder)
    student_untouched = all(
        np.array_equal(a + (1.0 if any(p is q for q in model.encoder.parameters()) else 0.0), p.data)
        for a, p in zip(snapshot, model.parameters())
    )
    teacher_moved = all(not np.array_equal(a, p.data) for a, p in zip(t_before, t_params))
    same_storage = ids == [id(p.data) for p in shared]
    passed = disjoint and owns_encoder_only and reads_shared and student_untouched and teacher_moved and same_storage
    acceptance(
        5,
        passed,
        f"shared storage read by teacher={reads_shared}, teacher encoder disjoint={disjoint}, "
        f"EMA moved teacher only={student_untouched and teacher_moved}",
    )
    assert passed


# -- 6 ----------------------------------------------------------------------------------


def test_criterion_06_masking_exactness(acceptance):
    bad = []
    ratios = np.round(np.linspace(0.0, 1.0, 41), 4)
    for n in list(range(1, 65)) + [100, 196, 256, 784]:
        for ratio in ratios:
            for seed in range(3):
                m = sample_mask(n, float(ratio), seed)
                if m.num_masked != int(round(ratio * n)):
                    bad.append((n, ratio, seed))
    defaults = (ModelConfig().mask_ratio, TrainConfig().mask_ratio)
    forty = sample_mask(100, 0.4, 0).num_masked
    passed = not bad and defaults == (0.4, 0.4) and forty == 40
    acceptance(6, passed, f"{len(bad)} mismatches over {68 * 41 * 3} (N, beta, seed) cases; default beta {defaults[0]}")
    assert passed


# -- 7 ----------------------------------------------------------------------------------


def test_criterion_07_loss_and_metric_oracles(acceptance):
    worst = {k: 0.0 for k in ("disparity_loss", "recon_loss", "avgerr", "rmse", "bad", "d1")}
    for seed in range(50):
        r = np.random.default_rng(7000 + seed)
        d, gt, pgt = r.uniform(0.5, 20, (3, 8, 8))
        d = gt + r.normal(scale=4.0, size=(8, 8))
        sigma = r.uniform(0.1, 3.0, (8, 8))
        valid = r.random((8, 8)) < 0.6
        valid[0, 0] = True
        pred = DisparityPrediction(Tensor(d[None]), Tensor(sigma[None]))
        got = disparity_loss(pred, SupervisionBundle(gt[None], valid[None], pgt[None])).item()
        ref = disparity_loss_loop(d.tolist(), sigma.tolist(), gt.tolist(), valid.tolist(), pgt.tolist())
        worst["disparity_loss"] = max(worst["disparity_loss"], abs(got - ref))

        img, rec = r.random((2, 8, 8, 3))
        flags = r.random(16) < 0.5
        flags[seed % 16] = True
        mask = PatchMask(flags)
        got = recon_loss(Tensor(rec), img, mask, 2).item()
        ref = recon_loss_loop(rec.tolist(), img.tolist(), mask.pixel_mask(2, 4, 4).tolist())
        worst["recon_loss"] = max(worst["recon_loss"], abs(got - ref))

        args = (d.tolist(), gt.tolist(), valid.tolist())
        worst["avgerr"] = max(worst["avgerr"], abs(metrics.avgerr(d, gt, valid) - avgerr_loop(*args)))
        worst["rmse"] = max(worst["rmse"], abs(metrics.rmse(d, gt, valid) - rmse_loop(*args)))
        for tau in (0.5, 1.0, 2.0, 3.0):
            worst["bad"] = max(worst["bad"], abs(metrics.bad_tau(d, gt, valid, tau) - bad_loop(*args, tau)))
        worst["d1"] = max(worst["d1"], abs(metrics.d1(d, gt, valid) - d1_loop(*args)))
    passed = all(v <= 1e-12 for v in worst.values())
    acceptance(7, passed, "max abs deviation " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert passed


# -- 8 ----------------------------------------------------------------------------------

OVERFIT_STEPS = 2000
OVERFIT_CONFIG = dict(lr=5e-4, epochs=OVERFIT_STEPS // 2, batch_size=4, seed=0)


@pytest.mark.slow
def test_criterion_08_overfit(acceptance):
    start = time.perf_counter()
    samples = [synth_generate(s, 64, 128) for s in range(8)]
    trainer = Trainer(TrainConfig(**OVERFIT_CONFIG), ModelConfig(), samples)
    recon0 = masked_recon_mse(trainer.model, samples, 0.4, seed=123)
    trainer.run(num_steps=OVERFIT_STEPS)
    recon = masked_recon_mse(trainer.model, samples, 0.4, seed=123)
    student = trainer.evaluate(samples, trainer.model.encoder)["avgerr"]
    teacher = trainer.evaluate(samples, trainer.teacher.encoder)["avgerr"]
    elapsed = time.perf_counter() - start
    passed = student < 0.5 and recon < 0.25 * recon0 and elapsed < 15 * 60
    acceptance(
        8,
        passed,
        f"train avgerr {student:.3f} px (teacher path {teacher:.3f}), recon MSE {recon / recon0:.1%} of step 0, "
        f"{elapsed / 60:.1f} min",
    )
    assert passed


# -- 9 ----------------------------------------------------------------------------------


def test_criterion_09_attention_distance(acceptance, tmp_path):
    identity = analysis.attention_distance(analysis.AttentionRecord(1, 0, np.eye(32), 4, 8, 16))
    worst = 0.0
    for gh, gw in ((2, 2), (4, 8), (3, 5)):
        n = gh * gw
        w = np.full((n, n), 1.0 / n)
        centers = [((r + 0.5) * 16, (c + 0.5) * 16) for r in range(gh) for c in range(gw)]
        brute = sum(
            w[q, k] * np.hypot(a[0] - b[0], a[1] - b[1]) for q, a in enumerate(centers) for k, b in enumerate(centers)
        ) / n
        worst = max(worst, abs(analysis.attention_distance(analysis.AttentionRecord(1, 0, w, gh, gw, 16)) - brute))
    cfg = toy_config()
    model = MaDisStereo(cfg, 9)
    analysis.collect_and_emit(model, [synth_generate(90, 32, 64)], tmp_path / "att.csv")
    rows = analysis.read_distance_csv(tmp_path / "att.csv")
    passed = identity == 0.0 and worst <= 1e-9 and len(rows) == cfg.decoder_depth * cfg.num_heads
    acceptance(9, passed, f"identity {identity}, uniform vs oracle {worst:.1e}, CSV rows {len(rows)}")
    assert passed


# -- 10 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_10_ablation_harness(acceptance, tmp_path):
    samples = [synth_generate(100 + s, 32, 64) for s in range(2)]
    cfg = TrainConfig(lr=1e-3, epochs=1, batch_size=2)
    shapes = {}
    for mode, expected in (("mask_ratio_sweep", 9), ("ema_toggle", 2), ("loss_weight_sweep", 5)):
        path = tmp_path / f"{mode}.csv"
        ablate(mode, cfg, samples, toy_config(), csv_path=path)
        rows = list(csv.reader(path.open()))
        shapes[mode] = (len(rows) - 1, {len(r) for r in rows})
    ok = shapes == {"mask_ratio_sweep": (9, {7}), "ema_toggle": (2, {7}), "loss_weight_sweep": (5, {7})}

    # qualitative trend, reported only: beta 0.9 versus beta 0.4 after a short toy run
    train = [synth_generate(200 + s, 32, 64) for s in range(8)]
    held = [synth_generate(300 + s, 32, 64) for s in range(4)]
    trend = ablate("mask_ratio_sweep", TrainConfig(lr=5e-4, epochs=75, batch_size=4), train, toy_config(),
                   eval_set=held, arms=["40", "90"])
    by_arm = {r["arm"]: r["avgerr"] for r in trend}
    direction = "underperforms" if by_arm["90"] > by_arm["40"] else "does not underperform"
    acceptance(
        10,
        ok,
        f"CSV shapes {', '.join(f'{m} {n}x{sorted(c)[0]}' for m, (n, c) in shapes.items())}; "
        f"trend (reported): beta 0.9 avgerr {by_arm['90']:.3f} {direction} beta 0.4 avgerr {by_arm['40']:.3f}",
    )
    assert ok


# -- 11 ---------------------------------------------------------------------------------


def test_criterion_11_determinism_and_resume(acceptance, tmp_path):
    samples = [synth_generate(110 + s, 32, 64) for s in range(4)]

    def make():
        return Trainer(TrainConfig(lr=1e-3, epochs=3, batch_size=2, seed=11), toy_config(), samples)

    a, b = make(), make()
    same_reports = a.run(num_steps=4) == b.run(num_steps=4)

    full = make()
    full.run(num_steps=6)
    part = make()
    part.run(num_steps=3)
    part.save(tmp_path / "ck.npz")
    resumed = Trainer.load(tmp_path / "ck.npz", samples)
    resumed.run(num_steps=3)
    same_tail = resumed.reports == full.reports[3:]
    same_params = all(np.array_equal(p.data, q.data) for p, q in zip(full.model.parameters(), resumed.model.parameters()))
    same_teacher = all(
        np.array_equal(p.data, q.data) for p, q in zip(full.teacher.encoder.parameters(), resumed.teacher.encoder.parameters())
    )
    same_optim = all(
        np.array_equal(full.optimizer.state_arrays()[k], v) for k, v in resumed.optimizer.state_arrays().items()
    )
    passed = same_reports and same_tail and same_params and same_teacher and same_optim
    acceptance(
        11,
        passed,
        f"repeat run identical={same_reports}; resume reports/params/teacher/optimizer identical="
        f"{same_tail}/{same_params}/{same_teacher}/{same_optim}",
    )
    assert passed
