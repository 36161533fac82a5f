"""End-to-end experiment drivers behind the command line.

Each driver takes a fully resolved configuration dict (see `cli.DEFAULTS`) and
returns an ExperimentResult: named CSV tables (header row first) plus model
checkpoints to be written next to them. Every driver is deterministic for a
fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .data import Dataset, make_class_mixture, make_gaussian_dataset, \
    make_pat_toy_dataset, split_score_region
from .diagnostics import EXTRAPOLATION, SUPERVISION, calibrated_l2_values, \
    cfg_gap_curve, memorization_ratio, pat_quality, regress_to_origin_ratio, \
    score_error, supervision_loss, fit_quality_line, QualityPoint
from .empirical import EmpiricalScoreOracle
from .errors import InvalidArgumentError
from .geometry import bhattacharyya_overlap, r_star
from .models import GaussianGroundTruthField, IDENTITY, MlpScoreNetwork, \
    OracleField, POLAR, RADIAL_EQUIVARIANT, fit_krr_denoiser_field
from .numerics import RngStream, sliced_wasserstein
from .sampling import SolverConfig, denoise_from, sample
from .schedule import VELOCITY
from .training import TrainConfig, TrainReport, ema_network, train

Table = list  # header row followed by value rows


@dataclass
class ExperimentResult:
    tables: dict = dc_field(default_factory=dict)       # name -> Table
    checkpoints: dict = dc_field(default_factory=dict)  # name -> (net, ema_params)


# ---------------------------------------------------------------------------
# shared builders

def build_dataset(dcfg: dict, seed: int) -> Dataset:
    kind = dcfg["kind"]
    if kind == "gaussian":
        return make_gaussian_dataset(dcfg["dim"], dcfg["n_points"], seed=seed)
    if kind == "pat-toy":
        return make_pat_toy_dataset()
    if kind == "class-mixture":
        return make_class_mixture(
            dcfg["dim"], dcfg["n_per_class"], seed=seed,
            separation=dcfg["separation"], cluster_std=dcfg["cluster_std"],
            num_classes=dcfg["num_classes"])
    raise InvalidArgumentError(f"unknown dataset kind {kind!r}")


def build_model(mcfg: dict, ds: Dataset, seed: int,
                conditional: bool = False) -> MlpScoreNetwork:
    num_classes = ds.num_classes if (conditional and ds.labels is not None) else 0
    return MlpScoreNetwork(
        ds.dim, width=mcfg["width"], hidden_layers=mcfg["hidden_layers"],
        prediction_kind=mcfg["prediction_kind"], input_map=mcfg["input_map"],
        time_freqs=mcfg["time_freqs"], num_classes=num_classes,
        class_emb_dim=mcfg["class_emb_dim"] if num_classes else 0, seed=seed)


def build_train_config(tcfg: dict, seed: int, loss_kind: str = "dsm",
                       class_dropout: float = 0.0) -> TrainConfig:
    return TrainConfig(
        iterations=tcfg["iterations"], batch_size=tcfg["batch_size"],
        lr=tcfg["lr"], ema_decay=tcfg["ema_decay"],
        eval_interval=tcfg["eval_interval"], loss_kind=loss_kind,
        class_dropout=class_dropout, seed=seed, t_min=tcfg["t_min"])


def build_solver(scfg: dict) -> SolverConfig:
    return SolverConfig(kind=scfg["kind"], atol=scfg["atol"], rtol=scfg["rtol"],
                        t_min=scfg["t_min"], fixed_steps=scfg["fixed_steps"])


def loss_curve_table(report: TrainReport) -> Table:
    return [["iteration", "loss"], *[[it, ls] for it, ls in report.loss_curve]]


def samples_table(samples: np.ndarray) -> Table:
    d = samples.shape[1]
    header = [f"z_{j}" for j in range(d)]
    return [header, *[list(map(float, row)) for row in samples]]


# ---------------------------------------------------------------------------
# gaussian: selective underfitting on an isotropic-normal training set

def run_gaussian(cfg: dict) -> ExperimentResult:
    seed = cfg["seed"]
    ds = build_dataset(cfg["dataset"], seed)
    net = build_model(cfg["model"], ds, seed)
    oracle_field = OracleField(EmpiricalScoreOracle(ds))
    gt_field = GaussianGroundTruthField(ds.dim)
    diag = cfg["diagnostics"]
    # "ambient" draws come from the true data distribution, not the finite
    # training set: reuse the supervision-region estimator over fresh draws.
    ambient_ds = make_gaussian_dataset(ds.dim, diag["n"], seed=seed + 1)

    def errors(field, tag):
        kw = dict(n=diag["n"], timesteps=diag["timesteps"], seed=seed)
        return {
            f"{tag}sup_vs_empirical": score_error(field, oracle_field,
                                                  SUPERVISION, ds, **kw).value,
            f"{tag}sup_vs_gt": score_error(field, gt_field, SUPERVISION, ds,
                                           **kw).value,
            f"{tag}ambient_vs_gt": score_error(field, gt_field, SUPERVISION,
                                               ambient_ds, **kw).value,
        }

    def hook(iteration, raw_net, ema_net):
        return {**errors(raw_net, ""), **errors(ema_net, "ema_")}

    tcfg = build_train_config(cfg["train"], seed)
    report = train(net, tcfg, dataset=ds, eval_hooks=[hook])

    names = ["sup_vs_empirical", "sup_vs_gt", "ambient_vs_gt",
             "ema_sup_vs_empirical", "ema_sup_vs_gt", "ema_ambient_vs_gt"]
    by_iter: dict[int, dict] = {}
    for it, name, value in report.eval_records:
        by_iter.setdefault(it, {})[name] = value
    rows = [[it, *[by_iter[it][n] for n in names]] for it in sorted(by_iter)]
    return ExperimentResult(
        tables={"loss_curve": loss_curve_table(report),
                "error_curves": [["iteration", *names], *rows]},
        checkpoints={"model": (net, report.ema_params)})


# ---------------------------------------------------------------------------
# foe: region-decoupled training sweep over the region-subset size

def run_foe(cfg: dict) -> ExperimentResult:
    seed = cfg["seed"]
    ds = build_dataset(cfg["dataset"], seed)
    n_score = cfg["n_score"]
    solver = build_solver(cfg["solver"])
    rows = []
    result = ExperimentResult()
    for factor in cfg["region_factors"]:
        n_region = n_score * factor
        pair = split_score_region(ds, n_score, n_region, seed=seed)
        net = build_model(cfg["model"], ds, seed)
        tcfg = build_train_config(cfg["train"], seed, loss_kind="foe")
        report = train(net, tcfg, dataset=ds, subset_pair=pair)
        sampler = ema_network(net, report.ema_params)
        samples, _ = sample(sampler, cfg["n_samples"], solver, seed=seed + 2)
        score_pts = ds.points[pair.score_idx]
        cal = calibrated_l2_values(samples, score_pts, n=cfg["calibration_n"])
        for thr in cfg["thresholds"]:
            rows.append([factor, n_region, thr, float(np.mean(cal < thr))])
        rows.append([factor, n_region, "mean_calibrated", float(np.mean(cal))])
        result.tables[f"samples_factor{factor}"] = samples_table(samples)
        result.checkpoints[f"model_factor{factor}"] = (net, report.ema_params)
    result.tables["foe_sweep"] = [
        ["region_factor", "n_region", "threshold", "value"], *rows]
    return result


# ---------------------------------------------------------------------------
# pat: four-point toy, baseline versus perception-aligned variants

PAT_VARIANTS = ("baseline", "polar", "krr", "equivariant")
_PAT_INPUT_MAPS = {"baseline": IDENTITY, "polar": POLAR,
                   "equivariant": RADIAL_EQUIVARIANT}


def _pat_field(cfg: dict, variant: str, ds: Dataset, seed: int):
    if variant == "krr":
        k = cfg["krr"]
        field = fit_krr_denoiser_field(
            ds, n_draws=k["n_draws"], gamma=k["gamma"], ridge=k["ridge"],
            seed=seed, input_map=POLAR, time_scale=k["time_scale"],
            t_min=cfg["solver"]["t_min"])
        return field, None
    mcfg = dict(cfg["model"])
    mcfg["input_map"] = _PAT_INPUT_MAPS[variant]
    net = build_model(mcfg, ds, seed)
    report = train(net, build_train_config(cfg["train"], seed), dataset=ds)
    return ema_network(net, report.ema_params), (net, report.ema_params)


def run_pat(cfg: dict) -> ExperimentResult:
    seed = cfg["seed"]
    ds = make_pat_toy_dataset()
    solver = build_solver(cfg["solver"])
    result = ExperimentResult()
    quality_rows = []
    for variant in cfg["variants"]:
        if variant not in PAT_VARIANTS:
            raise InvalidArgumentError(f"unknown pat variant {variant!r}")
        field, ckpt = _pat_field(cfg, variant, ds, seed)
        samples, _ = sample(field, cfg["n_samples"], solver, seed=seed + 2,
                            dim=2)
        bad, good, other = pat_quality(samples)
        quality_rows.append([variant, bad, good, other])
        result.tables[f"samples_{variant}"] = samples_table(samples)
        if ckpt is not None:
            result.checkpoints[f"model_{variant}"] = ckpt
    result.tables["pat_quality"] = [
        ["variant", "bad_fraction", "good_fraction", "other_fraction"],
        *quality_rows]
    return result


# ---------------------------------------------------------------------------
# cfg-gap: conditional/unconditional score gap by region

def run_cfg_gap(cfg: dict) -> ExperimentResult:
    seed = cfg["seed"]
    ds = build_dataset(cfg["dataset"], seed)
    if ds.labels is None:
        raise InvalidArgumentError("cfg-gap needs a labeled dataset")
    net = build_model(cfg["model"], ds, seed, conditional=True)
    tcfg = build_train_config(cfg["train"], seed,
                              class_dropout=cfg["class_dropout"])
    report = train(net, tcfg, dataset=ds)
    model = ema_network(net, report.ema_params)
    solver = build_solver(cfg["solver"])
    t_grid = np.asarray(cfg["t_grid"], dtype=float)
    diag = cfg["diagnostics"]

    from .diagnostics import _as_score_batch  # score-space views of the model

    def model_cond(zs, t, labels):
        return np.stack([_as_score_batch(model, zs[i:i + 1], t, int(labels[i]))[0]
                         for i in range(zs.shape[0])])

    def model_uncond(zs, t):
        return _as_score_batch(model, zs, t, None)

    cond_oracle = {c: EmpiricalScoreOracle(ds, class_filter=c)
                   for c in range(ds.num_classes)}
    uncond_oracle = EmpiricalScoreOracle(ds)

    def oracle_cond(zs, t, labels):
        return np.stack([cond_oracle[int(labels[i])].score(zs[i], t)
                         for i in range(zs.shape[0])])

    def oracle_uncond(zs, t):
        return uncond_oracle.score_batch(zs, t)

    rows = []
    for source, cond, uncond, regions in (
            ("model", model_cond, model_uncond, (SUPERVISION, EXTRAPOLATION)),
            ("oracle", oracle_cond, oracle_uncond, (SUPERVISION,))):
        for region in regions:
            for t, med, p10, p90 in cfg_gap_curve(
                    cond, uncond, ds, region, t_grid, n=diag["n"], seed=seed,
                    traj_field=model, solver=solver):
                rows.append([source, region, t, med, p10, p90])
    # reference scale: mean supervision-region oracle score norm per timestep
    norm_rows = []
    rng = RngStream(seed, stream=5)
    idx = rng.integers(0, ds.size, diag["n"])
    x = ds.points[idx]
    eps = rng.normal(x.shape)
    for t in t_grid:
        zs = (1.0 - t) * x + t * eps
        norms = np.linalg.norm(uncond_oracle.score_batch(zs, float(t)), axis=1)
        norm_rows.append([float(t), float(np.mean(norms))])
    return ExperimentResult(
        tables={"cfg_gap": [["source", "region", "t", "median", "p10", "p90"],
                            *rows],
                "score_norms": [["t", "mean_score_norm"], *norm_rows]},
        checkpoints={"model": (net, report.ema_params)})


# ---------------------------------------------------------------------------
# memorize-from-t: partial denoising from forward-noised training points

def run_memorize_from_t(cfg: dict) -> ExperimentResult:
    seed = cfg["seed"]
    ds = build_dataset(cfg["dataset"], seed)
    net = build_model(cfg["model"], ds, seed)
    report = train(net, build_train_config(cfg["train"], seed), dataset=ds)
    model = ema_network(net, report.ema_params)
    solver = build_solver(cfg["solver"])
    rng = RngStream(seed, stream=3)
    reps = cfg["noise_draws"]
    idx = np.tile(np.arange(ds.size), reps)
    eps = rng.normal((idx.size, ds.dim))
    rows = []
    for t_from in cfg["t_from_grid"]:
        pairs = []
        cals = []
        for k, i in enumerate(idx):
            z = (1.0 - t_from) * ds.points[i] + t_from * eps[k]
            out = denoise_from(model, z, float(t_from), solver)
            pairs.append((int(i), out))
            cals.append(calibrated_l2_values(out[None, :], ds.points,
                                             n=cfg["calibration_n"])[0])
        rows.append([float(t_from), regress_to_origin_ratio(pairs, ds.points),
                     float(np.mean(cals))])
    return ExperimentResult(
        tables={"memorize_from_t":
                [["t_from", "regress_to_origin", "mean_calibrated_l2"], *rows]},
        checkpoints={"model": (net, report.ema_params)})


# ---------------------------------------------------------------------------
# rstar-profile: nearest-shell statistics along sampling trajectories

def run_rstar_profile(cfg: dict) -> ExperimentResult:
    seed = cfg["seed"]
    ds = build_dataset(cfg["dataset"], seed)
    field = OracleField(EmpiricalScoreOracle(ds))
    solver = build_solver(cfg["solver"])
    _, trajectories = sample(field, cfg["n_samples"], solver, seed=seed,
                             record=True)
    t_grid = np.asarray(cfg["t_grid"], dtype=float)
    rows = []
    for t in t_grid:
        vals = np.array([r_star(ds, traj.state_at(float(t)), float(t)).r_star
                         for traj in trajectories])
        rows.append([float(t), float(np.mean(vals)),
                     float(np.percentile(vals, 10)),
                     float(np.percentile(vals, 90))])
    return ExperimentResult(
        tables={"rstar_profile":
                [["t", "mean_normalized_rstar", "p10", "p90"], *rows]})


# ---------------------------------------------------------------------------
# overlap-curve: Bhattacharyya shell-overlap coefficient over time

def run_overlap_curve(cfg: dict) -> ExperimentResult:
    seed = cfg["seed"]
    ds = build_dataset(cfg["dataset"], seed)
    t_grid = np.asarray(cfg["t_grid"], dtype=float)
    rows = [[float(t), "all", bhattacharyya_overlap(ds, float(t))]
            for t in t_grid]
    if ds.labels is not None:
        for c in range(ds.num_classes):
            rows.extend([[float(t), str(c),
                          bhattacharyya_overlap(ds, float(t), class_filter=c)]
                         for t in t_grid])
    return ExperimentResult(
        tables={"overlap_curve": [["t", "class", "overlap"], *rows]})


# ---------------------------------------------------------------------------
# scaling-line: supervision loss versus sample quality across model widths

def run_scaling_line(cfg: dict) -> ExperimentResult:
    seed = cfg["seed"]
    ds = build_dataset(cfg["dataset"], seed)
    oracle_field = OracleField(EmpiricalScoreOracle(ds))
    solver = build_solver(cfg["solver"])
    diag = cfg["diagnostics"]
    reference = RngStream(seed, stream=7).normal((cfg["n_reference"], ds.dim))
    if cfg["dataset"]["kind"] == "class-mixture":
        reference = build_dataset(cfg["dataset"], seed + 9).points
    points = []
    rows = []
    result = ExperimentResult()
    for width in cfg["widths"]:
        mcfg = dict(cfg["model"])
        mcfg["width"] = width
        net = build_model(mcfg, ds, seed)
        report = train(net, build_train_config(cfg["train"], seed), dataset=ds)
        model = ema_network(net, report.ema_params)
        loss = supervision_loss(model, oracle_field, ds, n=diag["n"],
                                timesteps=diag["timesteps"], seed=seed)
        samples, _ = sample(model, cfg["n_samples"], solver, seed=seed + 2)
        quality = sliced_wasserstein(samples, reference, seed=seed)
        points.append(QualityPoint(loss, quality, tag=f"width{width}"))
        rows.append([width, loss, quality])
        result.checkpoints[f"model_width{width}"] = (net, report.ema_params)
    slope, intercept, rms = fit_quality_line(points)
    result.tables["scaling_points"] = [
        ["width", "supervision_loss", "quality"], *rows]
    result.tables["scaling_fit"] = [
        ["slope", "intercept", "rms_residual"], [slope, intercept, rms]]
    return result


RUNNERS = {
    "gaussian": run_gaussian,
    "foe": run_foe,
    "pat": run_pat,
    "cfg-gap": run_cfg_gap,
    "memorize-from-t": run_memorize_from_t,
    "rstar-profile": run_rstar_profile,
    "overlap-curve": run_overlap_curve,
    "scaling-line": run_scaling_line,
}
