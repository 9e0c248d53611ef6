"""Acceptance gate: one test per numbered criterion, one printed verdict each.

Criteria 1-5 are fast property checks against independent references
(closed-form schedule, algebraic identities, a noise-free oracle denoiser,
brute-force geometry, central finite differences). Criteria 6-8 share a
session-scoped experiment: 90 phantoms on 16^3 grids (2 mm spacing, the
CI-gating scale), a bridge denoiser and a Gaussian-endpoint ablation
trained identically for 50 epochs, then held-out sampling, seed-to-seed
variability, and thinning recovery. Criterion 9 re-runs CLI commands and
compares artifact bytes. The experiment fixture takes several minutes
single-threaded; everything else is seconds.
"""

import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

import conftest
from shapebridge import bridge, cli, denoiser, evaluate as ev, experiments as ex
from shapebridge import mesh as M, phantom, shapes
from shapebridge.denoiser import DenoiserConfig
from shapebridge.training import TrainerConfig
from shapebridge.volume import GridHeader, VoxelGrid

GOLDEN = Path(__file__).parent / "golden"


def report(n, ok, detail):
    """Print the criterion verdict, queue it for the terminal summary, assert."""
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    print(line, flush=True)
    conftest.ACCEPTANCE_VERDICTS.append(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. Schedule exactness


def test_criterion_1_schedule_exactness():
    t0 = time.time()
    worst = 0.0
    endpoints = True
    for T in (10, 200, 1000):
        sched = bridge.build_schedule(T)
        endpoints &= (
            sched.alpha[0] == 0.0
            and sched.alpha[T] == 1.0
            and sched.delta[0] == 0.0
            and sched.delta[T] == 0.0
            and abs(sched.delta[T // 2] - 0.5) <= 1e-12
        )
        t = np.arange(T + 1) / T
        worst = max(
            worst,
            float(np.abs(sched.alpha - t).max()),
            float(np.abs(sched.delta - 2.0 * t * (1.0 - t)).max()),
        )
    golden_ok = bridge.schedule_table(bridge.build_schedule(10)) == (
        GOLDEN / "schedule_T10.txt"
    ).read_text()
    elapsed = time.time() - t0
    ok = endpoints and worst <= 1e-15 and golden_ok and elapsed < 1.0
    report(
        1,
        ok,
        f"endpoints/midpoint exact for T in {{10, 200, 1000}}, closed-form "
        f"deviation {worst:.1e}, golden T=10 table "
        f"{'matches' if golden_ok else 'DIFFERS'} ({elapsed:.2f}s)",
    )


# ---------------------------------------------------------------------------
# 2. Denoising identity


def test_criterion_2_denoising_identity():
    t0 = time.time()
    sched = bridge.build_schedule(200)
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(1000):
        x0 = rng.uniform(-1, 1, size=(4, 4, 4))
        xT = rng.uniform(-1, 1, size=(4, 4, 4))
        eps = rng.standard_normal((4, 4, 4))
        t = int(rng.integers(0, sched.steps + 1))
        diff = (
            bridge.forward_sample_values(sched, x0, xT, t, eps)
            - bridge.training_target_values(sched, x0, xT, t, eps)
            - x0
        )
        worst = max(worst, float(np.abs(diff).max()))
    elapsed = time.time() - t0
    ok = worst < 1e-6 and elapsed < 1.0
    report(
        2,
        ok,
        f"forward_sample - training_target == x_0 within {worst:.1e} "
        f"over 1000 draws ({elapsed:.2f}s)",
    )


# ---------------------------------------------------------------------------
# 3. Sampler exactness


def test_criterion_3_sampler_exactness():
    t0 = time.time()
    T = 200
    sched = bridge.build_schedule(T)
    rng = np.random.default_rng(11)
    x0 = rng.uniform(-1, 1, size=(8, 8, 8))
    s_c = rng.uniform(-1, 1, size=(8, 8, 8))

    def oracle(x, t):
        # noise-free part of the target: alpha_t (x_T - x_0)
        return sched.alpha[t] * (s_c - x0)

    worst_oracle = 0.0
    for n in (1, 2, 10, T):
        plan = bridge.uniform_plan(sched, n, eta=0.0)
        out = bridge.sample_values(sched, plan, s_c, oracle)
        worst_oracle = max(worst_oracle, float(np.abs(out - x0).max()))

    def denoise(x, t):
        return 0.3 * np.tanh(x) + 0.05 * t / T

    seed = 555
    plan = bridge.uniform_plan(sched, T, eta=1.0, seed=seed)
    accelerated = bridge.sample_values(sched, plan, s_c, denoise)
    x = s_c.copy()
    for t in range(T, 0, -1):
        eps = bridge.noise_for(seed, t, x.shape)
        x = bridge.reverse_step_values(sched, x, s_c, denoise(x, t), t, eps)
    rel = float(np.abs(accelerated - x).max() / max(np.abs(x).max(), 1e-12))
    elapsed = time.time() - t0
    ok = worst_oracle < 1e-4 and rel < 1e-4 and elapsed < 10.0
    report(
        3,
        ok,
        f"oracle recovery within {worst_oracle:.1e} for plans {{1, 2, 10, {T}}}, "
        f"full stochastic plan vs step-by-step chain rel {rel:.1e} ({elapsed:.1f}s)",
    )


# ---------------------------------------------------------------------------
# 4. Geometry oracles


def test_criterion_4_geometry_oracles():
    t0 = time.time()

    # SDF fusion vs the scalar branch rules on 1e5 random pairs (exact).
    rng = np.random.default_rng(99)
    dims = (50, 50, 40)
    header = GridHeader(dims=dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0))
    sp = rng.uniform(-4, 4, size=dims).astype(np.float32)
    sw = rng.uniform(-4, 4, size=dims).astype(np.float32)
    # plant exact zeros so the boundary branch is exercised
    sp.ravel()[rng.choice(sp.size, 500, replace=False)] = 0.0
    sw.ravel()[rng.choice(sw.size, 500, replace=False)] = 0.0
    fused = shapes.fuse_cortex_sdf(
        VoxelGrid(header=header, data=sp), VoxelGrid(header=header, data=sw)
    )
    reference = np.where(
        (sp > 0) & (sw > 0),
        np.minimum(sp, sw),
        np.where((sp < 0) & (sw < 0), np.maximum(sp, sw), np.float32(0.0)),
    )
    fuse_ok = np.array_equal(fused.data, reference)

    # Accelerated distance queries vs a min-over-all-faces scan (exact).
    pts = rng.standard_normal((102, 3))
    pts *= 5.0 / np.linalg.norm(pts, axis=1, keepdims=True)
    from scipy.spatial import ConvexHull

    hull = ConvexHull(pts)
    remap = np.full(len(pts), -1, dtype=np.int64)
    remap[hull.vertices] = np.arange(len(hull.vertices))
    soup = M.TriangleMesh(vertices=pts[hull.vertices], faces=remap[hull.simplices])
    assert soup.num_faces == 200
    queries = rng.standard_normal((1000, 3)) * 8.0
    dist, _ = M.distances_to_mesh(queries, M.build_index(soup))
    a, b, c = soup.face_corners()
    n, m = len(queries), soup.num_faces
    pid = np.repeat(np.arange(n), m)
    fid = np.tile(np.arange(m), n)
    closest = M.closest_points_on_triangles(queries[pid], a[fid], b[fid], c[fid])
    brute = np.linalg.norm(queries[pid] - closest, axis=1).reshape(n, m).min(axis=1)
    dist_ok = np.array_equal(dist, brute)

    # ASSD of concentric icospheres: radii 10/9 differ by exactly 1 mm.
    d = ev.assd(
        M.icosphere(10.0, subdivisions=5),
        M.icosphere(9.0, subdivisions=5),
        n_points=100_000,
        seed=0,
    )
    assd_ok = abs(d - 1.0) <= 0.02

    elapsed = time.time() - t0
    ok = fuse_ok and dist_ok and assd_ok and elapsed < 30.0
    report(
        4,
        ok,
        f"fusion exact on 1e5 pairs: {fuse_ok}, accelerated distances exact on "
        f"1000 queries: {dist_ok}, icosphere ASSD {d:.4f} mm (want 1.00 +- 0.02) "
        f"({elapsed:.1f}s)",
    )


# ---------------------------------------------------------------------------
# 5. Gradient correctness


def test_criterion_5_gradient_correctness():
    t0 = time.time()
    config = DenoiserConfig(
        base_channels=4,
        channel_mults=(1, 2),
        condition_channels=("s_pial",),
        time_width=8,
        groups=2,
    )
    model = denoiser.build_model(config, seed=9)
    rng = np.random.default_rng(2024)
    with torch.no_grad():
        model.head.weight.copy_(
            torch.from_numpy(
                rng.uniform(-0.3, 0.3, size=tuple(model.head.weight.shape))
            ).float()
        )
        model.head.bias.copy_(
            torch.from_numpy(
                rng.uniform(-0.3, 0.3, size=tuple(model.head.bias.shape))
            ).float()
        )
    model = model.double()
    x = torch.from_numpy(rng.normal(size=(1, config.in_channels, 4, 4, 4)))
    t = torch.tensor([5])
    with torch.no_grad():
        base = model(x, t)
    # offset the L1 target from zero so no probe crosses the kink
    signs = np.where(rng.random(tuple(base.shape)) < 0.5, -0.4, 0.4)
    target = base + torch.from_numpy(signs)

    def loss_value():
        return (model(x, t) - target).abs().mean()

    model.zero_grad()
    loss_value().backward()

    h = 1e-5
    worst = 0.0
    checked = 0
    groups = 0
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        groups += 1
        flat = p.detach().reshape(-1)
        gflat = p.grad.reshape(-1)
        picks = rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False)
        for i in picks:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_value().item()
                flat[i] = orig - h
                down = loss_value().item()
                flat[i] = orig
            fd = (up - down) / (2.0 * h)
            grad = gflat[i].item()
            if abs(grad) < 1e-8:
                continue
            worst = max(worst, abs(fd - grad) / abs(grad))
            checked += 1
    elapsed = time.time() - t0
    ok = worst <= 1e-3 and checked > 0 and elapsed < 60.0
    report(
        5,
        ok,
        f"{groups} parameter groups, {checked} sampled entries, worst relative "
        f"deviation {worst:.1e} (limit 1e-3) ({elapsed:.1f}s)",
    )


# ---------------------------------------------------------------------------
# 6-8. Desk-scale experiment (shared fixture)


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    """Dataset + two trained denoisers reused by criteria 6, 7 and 8."""
    root = tmp_path_factory.mktemp("acceptance")
    spec = phantom.ci16()
    ds = root / "dataset"
    phantom.generate_dataset(spec, 90, seed=2024, out_dir=ds)

    T, epochs = 200, 50
    trainer_config = TrainerConfig(seed=11, learning_rate=1e-3, batch_size=2)
    configs = {
        "bridge": DenoiserConfig(),
        "gaussian": DenoiserConfig(
            condition_channels=("s_cortex", "s_pial", "s_white", "edge", "ribbon")
        ),
    }
    models = {}
    for kind, config in configs.items():
        trainer = ex.build_trainer(kind, T, config, trainer_config, model_seed=7)
        ex.train_from_manifests(
            trainer, ds / "manifest-train.txt", ds / "manifest-val.txt", epochs
        )
        models[kind] = trainer.ema_model()

    return SimpleNamespace(
        spec=spec,
        steps=T,
        plan=10,
        models=models,
        test_pairs=phantom.load_split(ds / "manifest-test.txt"),
    )


def test_criterion_6_end_to_end_experiment(experiment):
    t0 = time.time()
    s = experiment
    aggregates = {}
    for kind, plan in (("bridge", s.plan), ("gaussian", s.steps)):
        volumes = [
            ex.sample_pair(
                s.models[kind], kind, s.steps, plan, pair, s.spec.truncation,
                eta=1.0, seed=1000 + i,
            )
            for i, pair in enumerate(s.test_pairs)
        ]
        aggregates[kind] = ex.evaluate_generated(
            s.test_pairs, volumes, n_points=20000, seed=0
        ).aggregate()
    bw = aggregates["bridge"]["assd_white"]["mean"]
    bp = aggregates["bridge"]["assd_pial"]["mean"]
    gw = aggregates["gaussian"]["assd_white"]["mean"]
    gp = aggregates["gaussian"]["assd_pial"]["mean"]
    bound = 0.6 * s.spec.header.spacing[0]
    elapsed = time.time() - t0
    ok = bw < bound and bp < bound and bw < 0.8 * gw and bp < 0.8 * gp
    report(
        6,
        ok,
        f"bridge ASSD white {bw:.3f} / pial {bp:.3f} mm (< {bound:.1f}), "
        f"gaussian ablation {gw:.3f} / {gp:.3f}, ratios {bw / gw:.2f} / "
        f"{bp / gp:.2f} (< 0.8) over {len(s.test_pairs)} held-out phantoms "
        f"({elapsed:.0f}s)",
    )


def test_criterion_7_variability_in_skull_shell(experiment):
    t0 = time.time()
    s = experiment
    ratios = []
    for i, pair in enumerate(s.test_pairs):
        samples = ex.variability_samples(
            s.models["bridge"], "bridge", s.steps, s.plan, pair, s.spec.truncation,
            seeds=range(5 * i, 5 * i + 5),
        )
        maps = ev.variability_maps(samples, pair.image)
        ratios.append(ex.shell_ribbon_variance_ratio(maps, pair))
    ratios = np.array(ratios)
    elapsed = time.time() - t0
    ok = ratios.mean() >= 2.0
    report(
        7,
        ok,
        f"skull-shell / ribbon variance ratio mean {ratios.mean():.2f}, "
        f"min {ratios.min():.2f} across {len(ratios)} phantoms x 5 seeds "
        f"(want mean >= 2) ({elapsed:.0f}s)",
    )


def test_criterion_8_atrophy_recovery(experiment):
    t0 = time.time()
    s = experiment
    # The offsets span 0.1-0.6 voxel; pick the held-out phantom with the
    # thickest cortex so the largest offset does not clamp against the
    # white surface (thin items saturate and recovery flattens).
    thickness = [
        ev.cortical_thickness(p.mesh_white, p.mesh_pial).thickness
        for p in s.test_pairs
    ]
    pair = s.test_pairs[int(np.argmax(thickness))]
    spacing = s.spec.header.spacing[0]
    offsets = [round(v * spacing, 10) for v in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)]
    sample_fn = ex.atrophy_sample_fn(
        s.models["bridge"], "bridge", s.steps, s.plan, pair.image,
        s.spec.truncation, eta=1.0,
    )
    result = ev.atrophy_experiment(
        sample_fn, pair.mesh_pial, pair.mesh_white, s.spec.header,
        offsets=offsets, d_max=s.spec.truncation, seed=5, floor_runs=4,
    )
    recovered = [row.recovered for row in result.rows]
    introduced = [row.introduced for row in result.rows]
    mono = all(b > a for a, b in zip(recovered[1:], recovered[2:]))
    r = float(np.corrcoef(introduced[1:], recovered[1:])[0, 1])
    control_ok = abs(recovered[0]) <= result.noise_floor
    elapsed = time.time() - t0
    ok = mono and r > 0.9 and control_ok and elapsed < 1800.0
    report(
        8,
        ok,
        f"offsets 0.1-0.6 voxel on the thickest phantom: monotone {mono}, "
        f"pearson r {r:.3f} (> 0.9), control |{recovered[0]:.4f}| <= noise floor "
        f"{result.noise_floor:.4f}: {control_ok} ({elapsed:.0f}s)",
    )


# ---------------------------------------------------------------------------
# 9. Reproducibility


STUB_CONFIG = """\
[dataset]
n_items = 6
ratios = [3, 1, 2]
seed = 7

[schedule]
steps = 10

[model]
base_channels = 8
groups = 4

[training]
epochs = 2
model_seed = 1
"""


def test_criterion_9_cli_reproducibility(tmp_path):
    t0 = time.time()
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(STUB_CONFIG)
    outputs = []
    for tag in ("a", "b"):
        sched_file = tmp_path / f"schedule-{tag}.txt"
        ds = tmp_path / f"ds-{tag}"
        run = tmp_path / f"run-{tag}"
        assert cli.main(["schedule-dump", "--steps", "10", "--out", str(sched_file)]) == 0
        assert cli.main(["phantom", "--config", str(cfg), "--out", str(ds)]) == 0
        assert cli.main(
            ["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(run)]
        ) == 0
        outputs.append((sched_file, ds, run))
    (sa, da, ra), (sb, db, rb) = outputs
    checks = {
        "schedule table": sa.read_bytes() == sb.read_bytes(),
        "dataset manifest": (da / "manifest-train.txt").read_bytes()
        == (db / "manifest-train.txt").read_bytes(),
        "phantom volume": (da / "items" / "item-0000" / "image.cvg").read_bytes()
        == (db / "items" / "item-0000" / "image.cvg").read_bytes(),
        "checkpoint": (ra / "epoch-002.sbk").read_bytes()
        == (rb / "epoch-002.sbk").read_bytes(),
        "training log": (ra / "log.csv").read_bytes() == (rb / "log.csv").read_bytes(),
    }
    elapsed = time.time() - t0
    ok = all(checks.values())
    detail = ", ".join(
        f"{name} {'identical' if good else 'DIFFERS'}" for name, good in checks.items()
    )
    report(9, ok, f"{detail} ({elapsed:.0f}s)")
