"""End-to-end acceptance suite.

Each test records one numbered criterion; the pass/fail lines are printed in
the terminal summary. The pipeline tests drive the real ``petrel`` CLI in
subprocesses on the shipped configs.
"""

import csv
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from petrel import autodiff as ad
from petrel import detection as D
from petrel import training as T
from petrel import unet
from petrel.inference import infer_scene, plan_tiles
from petrel.raster import load_labels
from petrel.synthgen import ObserverModel, SceneSpec, generate_scene
from conftest import assert_grad_close, criterion, numeric_grad
from test_autodiff import direct_conv
from test_detection import max_matching, random_instance

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
OBSERVERS = ["reference"] + [f"obs{k}" for k in range(1, 8)]


def petrel(*args, timeout=3600):
    cmd = [sys.executable, "-m", "petrel", "--threads", "1", *[str(a) for a in args]]
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    assert proc.returncode == 0, f"{' '.join(cmd)} failed:\n{proc.stderr}"
    return proc.stdout


def run_pipeline(root: Path) -> dict:
    """generate -> train (colony_d held out) -> infer -> evaluate -> observers -> plot."""
    root.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    colonies, bird = root / "colonies", root / "bird"
    petrel("generate", CONFIGS / "colonies.json", colonies)
    petrel("generate", CONFIGS / "bird_island.json", bird)
    model = root / "model.json"
    petrel("train", colonies, model, "--config", CONFIGS / "desk.json", "--exclude-scene", "colony_d")
    t_train = time.perf_counter()
    petrel("infer", model, colonies / "colony_d", root / "colony_d.prob")
    op = petrel("evaluate", root / "colony_d.prob", colonies / "colony_d.truth.csv", root / "colony_d.pr.csv",
                "--threshold", "0.45", "--detections", root / "colony_d.detections.csv",
                "--svg", root / "colony_d.pr.svg")
    t_heldout = time.perf_counter()
    petrel("infer", model, bird / "bird_island", root / "bird_island.prob")
    labels = [bird / f"bird_island.{o}.csv" for o in OBSERVERS]
    obs_out = petrel("observers", "--heatmap", root / "bird_island.prob", "--labels", *labels,
                     "--out-dir", root / "observers")
    prs = [f"{o}={root / 'observers' / f'pr_{o}.csv'}" for o in OBSERVERS]
    plot_args = [x for p in prs for x in ("--pr", p)]
    petrel("plot", root / "fig4a.svg", *plot_args, "--matrix", root / "observers" / "observer_matrix.csv",
           "--title", "model vs observers")
    done = time.perf_counter()
    return {"root": root, "operating_point": op.strip(), "observers_stdout": obs_out.strip(),
            "seconds_heldout": t_heldout - started, "seconds_total": done - started,
            "seconds_train": t_train - started}


def read_report(root):
    return json.loads((root / "observers" / "report.json").read_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run1"))


# ------------------------------------------------------------ criterion 1

def test_c01_focal_loss_correctness():
    with criterion(1, "focal loss: gamma=0 equals BCE; 0.5 ln2 and 0.81 ln10") as note:
        started = time.perf_counter()
        rng = np.random.default_rng(2024)
        p = rng.uniform(1e-4, 1 - 1e-4, 1000)
        y = rng.integers(0, 2, 1000)
        fl0 = T.focal_loss(ad.Tensor(p), y, T.FocalLossConfig(0.0)).item()
        bce = -np.mean([math.log(pi) if yi else math.log(1 - pi) for pi, yi in zip(p, y)])
        v1 = T.focal_loss(ad.Tensor([0.5]), [1], T.FocalLossConfig(1.0)).item()
        v2 = T.focal_loss(ad.Tensor([0.9]), [0], T.FocalLossConfig(2.0)).item()
        elapsed = time.perf_counter() - started
        note["text"] = f"|FL0-BCE|={abs(fl0 - bce):.1e}, {v1:.6f}, {v2:.5f}, {elapsed:.2f}s"
        assert abs(fl0 - bce) <= 1e-9
        assert abs(v1 - 0.5 * math.log(2)) <= 1e-9
        assert abs(v2 - 0.81 * math.log(10)) <= 1e-9
        assert elapsed < 1.0


# ------------------------------------------------------------ criterion 2

def _check_op(build, arrays, rng):
    """Finite-difference check of every array input of ``build`` under a random linear readout."""
    out_shape = build(*[ad.Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape) if out_shape else np.array(1.0)

    def loss_value():
        out = build(*[ad.Tensor(a) for a in arrays])
        return float((out.data * weights).sum())

    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    ad.backward(ad.sum_all(ad.mul(out, ad.Tensor(weights))) if out.shape else out)
    for t, a in zip(tensors, arrays):
        assert_grad_close(t.grad, numeric_grad(loss_value, a))


def test_c02_gradient_fidelity():
    with criterion(2, "finite-difference gradients for every operator and a U-Net") as note:
        started = time.perf_counter()
        rng = np.random.default_rng(7)
        r = rng.standard_normal
        targets = rng.integers(0, 2, (2, 1, 4, 4))
        cases = {
            "conv2d_valid": (ad.conv2d_valid, [r((2, 3, 6, 5)), r((4, 3, 3, 3)), r(4)]),
            "conv1x1": (ad.conv1x1, [r((3, 4, 4)), r((2, 3, 1, 1)), r(2)]),
            "maxpool2": (ad.maxpool2, [r((2, 2, 6, 4))]),
            "upsample_bilinear2": (ad.upsample_bilinear2, [r((2, 2, 3, 4))]),
            "crop_concat": (ad.crop_concat, [r((2, 8, 8)), r((3, 4, 4))]),
            "relu": (ad.relu, [r((3, 5, 5))]),
            "sigmoid": (ad.sigmoid, [r((3, 5, 5)) * 3]),
            "mul": (ad.mul, [r((2, 3, 3)), r((2, 3, 3))]),
            "sum_all": (ad.sum_all, [r((2, 3, 4))]),
            "mean_all": (ad.mean_all, [r((2, 3, 4))]),
            "focal_loss": (lambda p: T.focal_loss(p, targets, T.FocalLossConfig(1.0)),
                           [rng.uniform(0.05, 0.95, (2, 1, 4, 4))]),
        }
        for name, (build, arrays) in cases.items():
            try:
                _check_op(build, arrays, rng)
            except AssertionError as exc:
                raise AssertionError(f"{name}: {exc}") from exc

        cfg = unet.UNetConfig(in_channels=5, depth=1, base_channels=4, input_size=44)
        params = {k: v.astype(np.float64) for k, v in unet.init_params(cfg, 11).items()}
        x = ad.Tensor(rng.random((1, 5, 44, 44)))
        y = (rng.random((1, 1, cfg.output_size, cfg.output_size)) < 0.05).astype(float)

        def loss_value():
            return T.focal_loss(unet.forward_tensors(unet.as_tensors(params), x, cfg), y).item()

        tensors = unet.as_tensors(params, requires_grad=True)
        ad.backward(T.focal_loss(unet.forward_tensors(tensors, x, cfg), y))
        # at eps=1e-4 a perturbed weight flips one or two ReLUs somewhere in the
        # network and the difference quotient straddles the kink; 1e-6 stays
        # inside one linear region while round-off remains ~1e-10
        n = 0
        for k, t in tensors.items():
            assert_grad_close(t.grad, numeric_grad(loss_value, params[k], eps=1e-6))
            n += params[k].size
        elapsed = time.perf_counter() - started
        note["text"] = f"{len(cases)} operators, U-Net {n} parameters, {elapsed:.1f}s"
        assert elapsed < 120


# ------------------------------------------------------------ criterion 3

def test_c03_shape_calculus():
    with criterion(3, "full-size U-Net shape trace 572 -> 388, channels 64..1024") as note:
        cfg = unet.UNetConfig(in_channels=5, depth=4, base_channels=64, input_size=572)
        trace = unet.shape_trace(cfg)
        sizes = [s for _, s, _ in trace]
        expected = [572, 570, 568, 284, 282, 280, 140, 138, 136, 68, 66, 64, 32, 30, 28,
                    56, 56, 54, 52, 104, 104, 102, 100, 200, 200, 198, 196, 392, 392, 390, 388, 388]
        channels = [c for name, _, c in trace if name.endswith("conv2") and name.startswith(("down", "bottom"))]
        note["text"] = f"output {cfg.output_size}, {len(trace)} stages"
        assert sizes == expected
        assert channels == [64, 128, 256, 512, 1024]
        assert trace[-1] == ("final", 388, 1)
        assert [c for name, _, c in trace if name.startswith("up") and name.endswith("conv2")] == [512, 256, 128, 64]


# ------------------------------------------------------------ criterion 4

def test_c04_convolution_oracle():
    with criterion(4, "conv2d_valid vs direct sum on 100 random shapes") as note:
        started = time.perf_counter()
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(100):
            c_in, c_out = rng.integers(1, 5, 2)
            k = int(rng.choice([1, 3]))
            h, w = rng.integers(k, 13, 2)
            x = rng.standard_normal((c_in, h, w))
            wt = rng.standard_normal((c_out, c_in, k, k))
            b = rng.standard_normal(c_out)
            got = ad.conv2d_valid(ad.Tensor(x), ad.Tensor(wt), ad.Tensor(b)).data
            ref = direct_conv(x, wt, b)
            assert got.shape == ref.shape
            worst = max(worst, float(np.abs(got - ref).max() / max(np.abs(ref).max(), 1e-300)))
        elapsed = time.perf_counter() - started
        note["text"] = f"max relative error {worst:.1e}, {elapsed:.1f}s"
        assert worst <= 1e-12
        assert elapsed < 30


# ------------------------------------------------------------ criterion 5

@pytest.mark.slow
def test_c05_heldout_precision_recall(pipeline):
    with criterion(5, "held-out scene reaches precision >= 0.80 and recall >= 0.80") as note:
        curve = D.read_pr_csv(pipeline["root"] / "colony_d.pr.csv")
        best = max(curve, key=lambda p: min(p.precision, p.recall))
        note["text"] = (f"best t={best.threshold:g} P={best.precision:.3f} R={best.recall:.3f}; "
                        f"{pipeline['operating_point']}; {pipeline['seconds_heldout'] / 60:.1f} min")
        assert best.precision >= 0.80 and best.recall >= 0.80
        assert pipeline["seconds_heldout"] <= 30 * 60


# ------------------------------------------------------------ criterion 6

@pytest.mark.slow
def test_c06_focal_gamma_ordering(tmp_path):
    with criterion(6, "mean AP(gamma=1) >= mean AP(gamma=0) over 3 seeds, test positives < 0.1%") as note:
        started = time.perf_counter()
        data = tmp_path / "colonies"
        petrel("generate", CONFIGS / "colonies.json", data)
        out = tmp_path / "sweep.csv"
        stdout = petrel("train", data, out, "--config", CONFIGS / "desk.json", "--exclude-scene", "colony_d",
                        "--sweep-gammas", "0,1", "--replicates", "3")
        elapsed = time.perf_counter() - started
        with open(out.with_name(out.name + ".runs.csv"), newline="") as fh:
            runs = list(csv.DictReader(fh))
        ap = {g: [float(r["average_precision"]) for r in runs if float(r["gamma"]) == g] for g in (0.0, 1.0)}
        stats = json.loads(out.with_name(out.name + ".manifest.json").read_text())["config"]["dataset"]["stats"]
        pos = stats["test_positive_fraction"]
        m0, m1 = np.mean(ap[0.0]), np.mean(ap[1.0])
        note["text"] = (f"AP gamma0 {m0:.3f} {np.round(ap[0.0], 3).tolist()}, gamma1 {m1:.3f} "
                        f"{np.round(ap[1.0], 3).tolist()}, test positives {100 * pos:.3f}%, {elapsed / 60:.1f} min")
        assert "gamma=1 mean_average_precision=" in stdout
        assert len(ap[0.0]) == len(ap[1.0]) == 3
        assert m1 >= m0
        assert pos < 0.001
        assert elapsed <= 90 * 60


# ------------------------------------------------------------ criterion 7

def test_c07_tiling_seam_free():
    with criterion(7, "900x700 heatmaps from two tile plans agree beyond 92 px") as note:
        started = time.perf_counter()
        cfg = unet.UNetConfig(in_channels=5, depth=2, base_channels=8, input_size=108)
        params = unet.init_params(cfg, 21)
        raster, _ = generate_scene(SceneSpec(900, 700, 120, seed=77, n_distractors=20))
        plan_a = plan_tiles(900, 700, cfg)
        plan_b = plan_tiles(900, 700, cfg, stride=41, offset=(23, 37))
        plan_a.check()
        plan_b.check()
        a = infer_scene(params, raster, cfg, plan_a)
        b = infer_scene(params, raster, cfg, plan_b)
        diff = np.abs(a - b)[92:-92, 92:-92].max()
        elapsed = time.perf_counter() - started
        note["text"] = (f"{len(plan_a.tiles)} vs {len(plan_b.tiles)} tiles, max interior diff {diff:.1e}, "
                        f"{elapsed:.0f}s")
        assert a.shape == (700, 900)
        assert diff <= 1e-6
        assert elapsed < 300


# ------------------------------------------------------------ criterion 8

def test_c08_matching_oracle():
    with criterion(8, "greedy matching vs exhaustive maximum matching, 1000 instances") as note:
        started = time.perf_counter()
        rng = np.random.default_rng(8)
        equal = 0
        for _ in range(1000):
            det, tru, scores = random_instance(rng, 40)
            greedy = D.match_points(det, tru, D.DEFAULT_RADIUS, scores).tp
            best = max_matching(det, tru, D.DEFAULT_RADIUS)
            assert greedy <= best
            equal += greedy == best
        elapsed = time.perf_counter() - started
        note["text"] = f"equal in {equal}/1000, never above, {elapsed:.1f}s"
        assert equal >= 950
        assert elapsed < 60


# ------------------------------------------------------------ criterion 9

@pytest.mark.slow
def test_c09_pr_mechanics(pipeline):
    with criterion(9, "PR arithmetic 752/157/183 and recall non-increasing on evaluated heatmaps") as note:
        p = D.PRPoint(0.45, 752, 157, 183)
        assert abs(p.precision - 0.8273) <= 5e-4
        assert abs(p.recall - 0.8043) <= 5e-4
        assert D.count_estimate(p) == 909
        root = pipeline["root"]
        files = [root / "colony_d.pr.csv"] + sorted((root / "observers").glob("pr_*.csv"))
        for f in files:
            curve = D.read_pr_csv(f)
            assert [c.threshold for c in curve] == D.default_thresholds(), f.name
            recalls = [c.recall for c in curve]
            assert all(b <= a for a, b in zip(recalls, recalls[1:])), f"{f.name}: {recalls}"
        note["text"] = f"P={p.precision:.4f} R={p.recall:.4f} count=909; {len(files)} curves monotone"


# ----------------------------------------------------------- criterion 10

@pytest.mark.slow
def test_c10_observer_study(pipeline):
    with criterion(10, "observer matrix diagonal, count bands, within range for >= 6/8") as note:
        root = pipeline["root"]
        spec = json.loads((CONFIGS / "bird_island.json").read_text())
        truth = load_labels(root / "bird" / "bird_island.truth.csv")
        assert len(truth) == 935
        models = {o["id"]: ObserverModel(**{k: v for k, v in o.items() if k != "id"}) for o in spec["observers"]}
        assert list(models) == OBSERVERS
        with open(root / "observers" / "observer_matrix.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 64
        for r in rows:
            if r["observer_as_truth"] == r["observer_as_detector"]:
                assert float(r["precision"]) == 1.0 and float(r["recall"]) == 1.0
        report = read_report(root)
        bands = []
        for name, model in models.items():
            mean, sd = model.expected_count(len(truth), spec["width"], spec["height"])
            count = report["counts"][name]
            bands.append(f"{name}={count}")
            assert abs(count - mean) <= 3 * sd, f"{name}: {count} outside {mean:.0f} +/- {3 * sd:.0f}"
        counts = [report["counts"][n] for n in OBSERVERS]
        assert min(counts) < len(truth) < max(counts)
        n_ok = report["n_within_range"]
        note["text"] = f"within range {n_ok}/8; counts {' '.join(bands)}; {pipeline['seconds_total'] / 60:.1f} min"
        assert report["n_truth_sets"] == 8
        assert n_ok >= 6
        assert pipeline["seconds_total"] <= 45 * 60


# ----------------------------------------------------------- criterion 11

@pytest.mark.slow
def test_c11_reproducibility(pipeline, tmp_path_factory):
    with criterion(11, "pipeline rerun with --threads 1 is byte-identical") as note:
        first = pipeline["root"]
        second = run_pipeline(tmp_path_factory.mktemp("run2"))["root"]
        compared, differing = 0, []
        for f in sorted(first.rglob("*")):
            if not f.is_file() or f.name.endswith(".manifest.json"):
                continue
            other = second / f.relative_to(first)
            compared += 1
            if not other.is_file() or other.read_bytes() != f.read_bytes():
                differing.append(str(f.relative_to(first)))
        kinds = {f.suffix for f in first.rglob("*") if f.is_file()}
        note["text"] = f"{compared} files compared, {len(differing)} differ"
        assert {".csv", ".svg", ".bin", ".json"} <= kinds
        assert (first / "model.json").is_file() and (first / "fig4a.svg").is_file()
        assert not differing, differing
