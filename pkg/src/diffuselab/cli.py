"""Experiment runner.

Every subcommand resolves one config, loops over its seeds, writes CSV/JSON
artifacts whose bodies are deterministic functions of (config, seed), and
drops a manifest recording the config, its hash, and runtime. ``report``
merges a directory of runs into summary tables and plot data.

Exit codes: 0 success, 1 validation/config errors, 2 numerical failures.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, analysis, config as cfg_mod, evaluation, gmm as gmm_mod, guidance, training
from .classifiers import (
    BayesClassifier,
    BayesTimeClassifier,
    classifier_from_checkpoint,
    default_classifier_spec,
)
from .errors import ConfigurationError, DomainError, NumericalError
from .evaluation import EnsembleConfig, ShiftSpec
from .guidance import GuidanceConfig
from .kernels import ACTIVE_BACKEND
from .nnet import load_checkpoint, save_checkpoint
from .scores import AnalyticMixtureScore, LearnedScore, default_score_spec
from .sde import forward_diffuse_batch
from .training import DiffAugConfig, checkpoint_of

# substream keys (fixed; part of the reproducibility contract)
_KEY_TRAIN_DATA, _KEY_TEST_DATA, _KEY_SCORE, _KEY_CLF, _KEY_GUID, _KEY_EVAL = range(1, 7)
_KEY_CERT, _KEY_OOD, _KEY_SAMPLE, _KEY_POINTS, _KEY_PRDC = range(7, 12)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) or isinstance(x, np.floating):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: Path, columns, rows, cfg_hash: str, seed: int) -> None:
    lines = [f"# config_hash={cfg_hash} seed={seed}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def write_json(path: Path, doc: dict, cfg_hash: str, seed: int) -> None:
    doc = {"config_hash": cfg_hash, "seed": seed, **doc}
    path.write_text(json.dumps(doc, sort_keys=True, indent=1, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_manifest(out: Path, subcommand: str, cfg: dict, cfg_hash: str, seed: int,
                   outputs, runtime_s: float) -> None:
    doc = {
        "subcommand": subcommand,
        "config": cfg,
        "config_hash": cfg_hash,
        "seed": seed,
        "outputs": [str(p.name) for p in outputs],
        "runtime_s": runtime_s,
        "versions": {
            "diffuselab": __version__,
            "numpy": np.__version__,
            "kernel_backend": ACTIVE_BACKEND,
        },
        "timestamp": time.time(),
    }
    (out / f"manifest_{subcommand}_seed{seed}.json").write_text(
        json.dumps(doc, sort_keys=True, indent=1) + "\n"
    )


# -- shared builders -----------------------------------------------------------


class RunContext:
    """Everything one (config, seed) run needs, built deterministically."""

    def __init__(self, cfg: dict, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        self.cfg_hash = cfg_mod.config_hash(cfg)
        self.fixture = cfg_mod.build_fixture(cfg["fixture"])
        self.schedule = cfg_mod.build_schedule(cfg)

    def rng(self, *keys):
        return cfg_mod.derive_rng(self.seed, *keys)

    def train_data(self) -> gmm_mod.LabeledDataset:
        return gmm_mod.sample_dataset(self.fixture, self.cfg["data"]["n_train"], self.rng(_KEY_TRAIN_DATA))

    def test_data(self) -> gmm_mod.LabeledDataset:
        return gmm_mod.sample_dataset(self.fixture, self.cfg["data"]["n_test"], self.rng(_KEY_TEST_DATA))

    def score_model(self, with_trace: bool = False):
        sc = self.cfg["score"]
        if sc["kind"] == "analytic":
            if with_trace:
                raise ConfigurationError("the analytic score has nothing to train")
            return AnalyticMixtureScore(self.fixture, self.schedule)
        if sc["kind"] == "checkpoint":
            if not sc["checkpoint"]:
                raise ConfigurationError("score.kind=checkpoint needs score.checkpoint path")
            ckpt = load_checkpoint(sc["checkpoint"])
            model = LearnedScore.from_checkpoint(ckpt, self.schedule)
            return (model, None) if with_trace else model
        if sc["kind"] != "train":
            raise ConfigurationError(f"unknown score kind {sc['kind']!r}")
        source = self.fixture if sc["train_on"] == "mixture" else self.train_data()
        spec = default_score_spec(dim=self.fixture.dim, init_seed=sc["init_seed"])
        model, trace = training.train_score(
            source, self.schedule, spec=spec, steps=sc["steps"], batch_size=sc["batch_size"],
            lr=sc["lr"], rng=self.rng(_KEY_SCORE),
        )
        return (model, trace) if with_trace else model

    def diffaug_config(self) -> DiffAugConfig:
        d = self.cfg["diffaug"]
        return DiffAugConfig(
            t_range=tuple(d["t_range"]),
            combine_weight=d["combine_weight"],
            use_x0_scale=d["use_x0_scale"],
            samples_per_example=d["samples_per_example"],
        )

    def classifier(self, with_trace: bool = False):
        c = self.cfg["classifier"]
        if c["checkpoint"]:
            model = classifier_from_checkpoint(load_checkpoint(c["checkpoint"]), self.schedule)
            return (model, None) if with_trace else model
        if c["kind"] == "bayes":
            if with_trace:
                raise ConfigurationError("the Bayes referee has nothing to train")
            return BayesClassifier(self.fixture)
        if c["kind"] not in ("baseline", "diffaug"):
            raise ConfigurationError(f"unknown classifier kind {c['kind']!r}")
        diffaug = self.diffaug_config() if c["kind"] == "diffaug" else None
        score = self.score_model() if c["kind"] == "diffaug" else None
        spec = default_classifier_spec(
            "plain", self.fixture.dim, self.fixture.n_classes, init_seed=c["init_seed"]
        )
        model, trace = training.train_classifier(
            self.train_data(), self.schedule, score=score, config=diffaug, spec=spec,
            steps=c["steps"], batch_size=c["batch_size"], lr=c["lr"], rng=self.rng(_KEY_CLF),
        )
        return (model, trace) if with_trace else model

    def guidance_classifier(self, with_trace: bool = False):
        c = self.cfg["guidance_classifier"]
        if c["checkpoint"]:
            model = classifier_from_checkpoint(load_checkpoint(c["checkpoint"]), self.schedule)
            return (model, None) if with_trace else model
        if c["kind"] == "bayes-time":
            if with_trace:
                raise ConfigurationError("the Bayes time classifier has nothing to train")
            return BayesTimeClassifier(self.fixture, self.schedule)
        if c["kind"] == "noisy":
            spec = default_classifier_spec(
                "time", self.fixture.dim, self.fixture.n_classes, init_seed=c["init_seed"]
            )
            model, trace = training.train_noisy_guidance(
                self.train_data(), self.schedule, spec=spec, steps=c["steps"],
                batch_size=c["batch_size"], lr=c["lr"], rng=self.rng(_KEY_GUID),
            )
        elif c["kind"] == "da":
            spec = default_classifier_spec(
                "da", self.fixture.dim, self.fixture.n_classes, init_seed=c["init_seed"]
            )
            model, trace = training.train_da_guidance(
                self.train_data(), self.schedule, self.score_model(), spec=spec,
                steps=c["steps"], batch_size=c["batch_size"], lr=c["lr"], rng=self.rng(_KEY_GUID),
            )
        else:
            raise ConfigurationError(f"unknown guidance classifier kind {c['kind']!r}")
        return (model, trace) if with_trace else model

    def ensemble_config(self) -> EnsembleConfig:
        e = self.cfg["ensemble"]
        return EnsembleConfig(
            times=cfg_mod.resolve_time_grid(e["times"]),
            draws_per_time=e["draws_per_time"],
            use_x0_scale=e["use_x0_scale"],
        )


def _trace_rows(trace):
    cols = [c for c in ("loss", "loss_orig", "loss_aug") if c in trace[0]]
    return ["step", *cols], [{k: r[k] for k in ("step", *cols)} for r in trace]


# -- subcommands ----------------------------------------------------------------


def cmd_train_score(ctx: RunContext, out: Path):
    cfg = dict(ctx.cfg, score=dict(ctx.cfg["score"], kind="train"))
    ctx = RunContext(cfg, ctx.seed)
    model, trace = ctx.score_model(with_trace=True)
    files = []
    ckpt_path = out / f"score_seed{ctx.seed}.ckpt"
    save_checkpoint(checkpoint_of(model, ctx.cfg_hash, trace=trace), ckpt_path)
    files.append(ckpt_path)
    if trace is not None:
        cols, rows = _trace_rows(trace)
        p = out / f"score_trace_seed{ctx.seed}.csv"
        write_csv(p, cols, rows, ctx.cfg_hash, ctx.seed)
        files.append(p)
    return files


def _train_named(ctx: RunContext, out: Path, name: str, builder):
    model, trace = builder(with_trace=True)
    files = []
    ckpt_path = out / f"{name}_seed{ctx.seed}.ckpt"
    save_checkpoint(checkpoint_of(model, ctx.cfg_hash, trace=trace), ckpt_path)
    files.append(ckpt_path)
    if trace is not None:
        cols, rows = _trace_rows(trace)
        p = out / f"{name}_trace_seed{ctx.seed}.csv"
        write_csv(p, cols, rows, ctx.cfg_hash, ctx.seed)
        files.append(p)
    return files


def cmd_train_classifier(ctx: RunContext, out: Path):
    return _train_named(ctx, out, "classifier", ctx.classifier)


def cmd_train_guidance(ctx: RunContext, out: Path):
    return _train_named(ctx, out, "guidance", ctx.guidance_classifier)


def _shift_specs(cfg) -> list:
    return [
        ShiftSpec(kind=k, severity=s)
        for k in cfg["shift"]["kinds"]
        for s in cfg["shift"]["severities"]
    ]


def cmd_eval_shift(ctx: RunContext, out: Path, modes=("default",)):
    clf = ctx.classifier()
    needs_de = "de" in modes
    rows = evaluation.shift_eval(
        clf,
        ctx.test_data(),
        _shift_specs(ctx.cfg),
        modes=modes,
        schedule=ctx.schedule if needs_de else None,
        score=ctx.score_model() if needs_de else None,
        ensemble=ctx.ensemble_config() if needs_de else None,
        rng=ctx.rng(_KEY_EVAL),
    )
    for r in rows:
        r["seed"] = ctx.seed
    name = "de_table" if needs_de else "shift_table"
    p = out / f"{name}_seed{ctx.seed}.csv"
    write_csv(p, ["shift", "severity", "mode", "seed", "accuracy"], rows, ctx.cfg_hash, ctx.seed)
    return [p]


def cmd_eval_de(ctx: RunContext, out: Path):
    return cmd_eval_shift(ctx, out, modes=("default", "de"))


def cmd_entropy_curve(ctx: RunContext, out: Path):
    clf = ctx.classifier()
    grid = sorted(cfg_mod.resolve_time_grid(ctx.cfg["entropy"]["t_grid"], t_max=900))
    curve = training.entropy_curve(
        clf, ctx.test_data(), ctx.schedule, ctx.score_model(), grid,
        ctx.rng(_KEY_EVAL), draws=ctx.cfg["entropy"]["draws"],
    )
    rows = [{"t": t, "mean_entropy": h} for t, h in curve]
    p = out / f"entropy_seed{ctx.seed}.csv"
    write_csv(p, ["t", "mean_entropy"], rows, ctx.cfg_hash, ctx.seed)
    return [p]


def cmd_certify(ctx: RunContext, out: Path):
    cert = ctx.cfg["certify"]
    clf = ctx.classifier()
    score = ctx.score_model()
    test = ctx.test_data()
    n_examples = min(cert["n_examples"], len(test))
    rows = []
    rng = ctx.rng(_KEY_CERT)
    for sigma_t in cert["sigma_ts"]:
        for i in range(n_examples):
            res = evaluation.certify_dds(
                clf, ctx.schedule, score, test.x[i], sigma_t,
                n0=cert["n0"], n=cert["n"], alpha=cert["alpha"], rng=rng,
            )
            rows.append(
                {
                    "example_id": i,
                    "y_true": int(test.y[i]),
                    "sigma_t": sigma_t,
                    "prediction": res.prediction,
                    "radius": res.radius,
                    "p_lower": res.p_lower,
                }
            )
    p = out / f"certification_seed{ctx.seed}.csv"
    write_csv(
        p, ["example_id", "y_true", "sigma_t", "prediction", "radius", "p_lower"],
        rows, ctx.cfg_hash, ctx.seed,
    )
    return [p]


def cmd_ood(ctx: RunContext, out: Path):
    ood_cfg = ctx.cfg["ood"]
    clf = ctx.classifier()
    rng = ctx.rng(_KEY_OOD)
    n = ctx.cfg["data"]["n_test"]
    in_data = ctx.test_data()
    if ood_cfg["translate"] is not None:
        shift = np.asarray(ood_cfg["translate"], dtype=np.float64)
        out_x = gmm_mod.sample_dataset(ctx.fixture, n, rng).x + shift
    else:
        out_fix = cfg_mod.build_fixture(ood_cfg["out_fixture"])
        out_x = gmm_mod.sample_dataset(out_fix, n, rng).x
    kwargs = {}
    if ood_cfg["mode"] == "diffaug":
        kwargs = {"schedule": ctx.schedule, "score": ctx.score_model(), "t": ood_cfg["t"], "rng": rng}
    s_in, s_out = evaluation.ood_scores(clf, in_data, out_x, mode=ood_cfg["mode"], **kwargs)
    rows = [{"split": "in", "score": v} for v in s_in] + [
        {"split": "out", "score": v} for v in s_out
    ]
    p1 = out / f"ood_scores_seed{ctx.seed}.csv"
    write_csv(p1, ["split", "score"], rows, ctx.cfg_hash, ctx.seed)
    p2 = out / f"ood_summary_seed{ctx.seed}.json"
    write_json(
        p2,
        {
            "auroc": evaluation.auroc(s_in, s_out),
            "fpr_at_tpr95": evaluation.fpr_at_tpr(s_in, s_out, 0.95),
            "mode": ood_cfg["mode"],
        },
        ctx.cfg_hash,
        ctx.seed,
    )
    return [p1, p2]


def _random_points(ctx: RunContext, n: int, rng):
    """(x, t) pairs with x ~ p_t(x), t ~ U(0, 1)."""
    t = rng.uniform(0.0, 1.0, size=n)
    x0 = gmm_mod.sample_dataset(ctx.fixture, n, rng).x
    x = forward_diffuse_batch(ctx.schedule, x0, t, rng)
    return x, t


def cmd_verify_theorem1(ctx: RunContext, out: Path):
    th = ctx.cfg["theorem1"]
    score = ctx.score_model()
    x, t = _random_points(ctx, th["n_points"], ctx.rng(_KEY_POINTS))
    reports = analysis.verify_theorem1(ctx.fixture, ctx.schedule, score, list(zip(x, t)))
    tol = th["tolerance"]
    diffs = [r.max_abs_diff for r in reports]
    analytic = ctx.cfg["score"]["kind"] == "analytic"
    doc = {
        "n_points": len(reports),
        "tolerance": tol,
        "max_abs_diff": max(diffs),
        "median_abs_diff": float(np.median(diffs)),
        "n_pass": int(sum(d < tol for d in diffs)),
        "score_kind": ctx.cfg["score"]["kind"],
        "rows": [r.to_row() for r in reports],
    }
    p = out / f"theorem1_seed{ctx.seed}.json"
    write_json(p, doc, ctx.cfg_hash, ctx.seed)
    if analytic and doc["n_pass"] != len(reports):
        raise NumericalError(
            f"theorem-1 gate failed: {len(reports) - doc['n_pass']} points above {tol}"
        )
    return [p]


def cmd_decompose_gradient(ctx: RunContext, out: Path):
    gcfg = ctx.cfg["gradient"]
    score = ctx.score_model()
    clf = ctx.guidance_classifier()
    if clf.kind != "da":
        raise ConfigurationError("decompose-gradient needs guidance_classifier.kind=da")
    rng = ctx.rng(_KEY_POINTS)
    t = gcfg["t"]
    x0 = gmm_mod.sample_dataset(ctx.fixture, gcfg["n_points"], rng).x
    tcol = np.full(gcfg["n_points"], float(t))
    xs = forward_diffuse_batch(ctx.schedule, x0, tcol, rng)
    ys = rng.integers(0, ctx.fixture.n_classes, size=gcfg["n_points"])
    residuals, align_trans, align_raw, rows = [], [], [], []
    for x, y in zip(xs, ys):
        dec = analysis.input_gradient_decomposition(clf, ctx.schedule, score, x, t, int(y))
        resid = float(np.max(np.abs(dec.total - (dec.partial_noisy + dec.transported))))
        pm = gmm_mod.posterior_moments(ctx.fixture, ctx.schedule, x, t)
        evals, evecs = np.linalg.eigh(pm.covariance)
        top = evecs[:, -1]
        a_t = _abs_cos(dec.transported, top)
        a_r = _abs_cos(dec.partial_denoised, top)
        residuals.append(resid)
        align_trans.append(a_t)
        align_raw.append(a_r)
        rows.append({"x": x.tolist(), "y": int(y), "identity_residual": resid,
                     "align_transported": a_t, "align_partial": a_r})
    doc = {
        "t": t,
        "max_identity_residual": max(residuals),
        "mean_align_transported": float(np.mean(align_trans)),
        "mean_align_partial": float(np.mean(align_raw)),
        "rows": rows,
    }
    p = out / f"gradient_seed{ctx.seed}.json"
    write_json(p, doc, ctx.cfg_hash, ctx.seed)
    return [p]


def _abs_cos(v, u) -> float:
    nv = np.linalg.norm(v)
    if nv == 0:
        return 0.0
    return float(abs(v @ u) / (nv * np.linalg.norm(u)))


def cmd_svd_jacobian(ctx: RunContext, out: Path):
    scfg = ctx.cfg["svd"]
    score = ctx.score_model()
    rng = ctx.rng(_KEY_POINTS)
    t = float(scfg["t"])
    x0 = gmm_mod.sample_dataset(ctx.fixture, scfg["n_points"], rng).x
    tcol = np.full(scfg["n_points"], t)
    xs = forward_diffuse_batch(ctx.schedule, x0, tcol, rng)
    rows = []
    for x in xs:
        J = analysis.denoiser_jacobian_fd(ctx.schedule, score, x, t)
        res = analysis.svd_jacobian(J)
        rows.append(
            {
                "x": x.tolist(),
                "singular_values": res.singular_values.tolist(),
                "asymmetry": float(np.max(np.abs(J - J.T))),
            }
        )
    p = out / f"svd_seed{ctx.seed}.json"
    write_json(p, {"t": t, "rows": rows}, ctx.cfg_hash, ctx.seed)
    return [p]


def cmd_sample(ctx: RunContext, out: Path):
    from .samplers import pc_sample

    s = ctx.cfg["sampling"]
    score = ctx.score_model()
    xs = pc_sample(
        ctx.schedule, score, n_steps=s["n_steps"], n_corrector=s["n_corrector"],
        snr=s["snr"], rng=ctx.rng(_KEY_SAMPLE), n_samples=s["n_samples"],
    )
    labels, _ = gmm_mod.bayes_classify(ctx.fixture, xs)
    rows = [
        {"x0": xs[i, 0], "x1": xs[i, 1], "bayes_label": int(labels[i])} for i in range(len(xs))
    ]
    p1 = out / f"samples_seed{ctx.seed}.csv"
    write_csv(p1, ["x0", "x1", "bayes_label"], rows, ctx.cfg_hash, ctx.seed)
    occupancy = np.bincount(labels, minlength=ctx.fixture.n_classes) / len(labels)
    p2 = out / f"sample_summary_seed{ctx.seed}.json"
    write_json(
        p2,
        {"occupancy": occupancy.tolist(), "weights": ctx.fixture.weights.tolist()},
        ctx.cfg_hash,
        ctx.seed,
    )
    return [p1, p2]


def cmd_sample_guided(ctx: RunContext, out: Path):
    s = ctx.cfg["sampling"]
    gcfg = ctx.cfg["guidance"]
    score = ctx.score_model()
    clf = ctx.guidance_classifier()
    kind_map = {"noisy": "noisy", "bayes-time": "noisy", "da": "denoising-augmented"}
    guide_kind = gcfg["classifier_kind"]
    if guide_kind not in ("noisy", "denoising-augmented"):
        guide_kind = kind_map[ctx.cfg["guidance_classifier"]["kind"]]
    rows, purity = [], {}
    for c in range(ctx.fixture.n_classes):
        conf = GuidanceConfig(
            lambda_s=gcfg["lambda_s"],
            scale_placement=gcfg["scale_placement"],
            classifier_kind=guide_kind,
            target_class=c,
        )
        xs, _ = guidance.guided_sample(
            ctx.schedule, score, clf, conf, n_steps=s["n_steps"],
            rng=ctx.rng(_KEY_SAMPLE, c), n_samples=s["n_samples"],
            n_corrector=s["n_corrector"], snr=s["snr"],
        )
        labels, _ = gmm_mod.bayes_classify(ctx.fixture, xs)
        purity[str(c)] = float(np.mean(labels == c))
        rows.extend(
            {"target_class": c, "x0": xs[i, 0], "x1": xs[i, 1], "bayes_label": int(labels[i])}
            for i in range(len(xs))
        )
    p1 = out / f"guided_samples_seed{ctx.seed}.csv"
    write_csv(p1, ["target_class", "x0", "x1", "bayes_label"], rows, ctx.cfg_hash, ctx.seed)
    p2 = out / f"guided_summary_seed{ctx.seed}.json"
    write_json(
        p2,
        {
            "purity": purity,
            "scale_placement": gcfg["scale_placement"],
            "lambda_s": gcfg["lambda_s"],
            "classifier_kind": guide_kind,
        },
        ctx.cfg_hash,
        ctx.seed,
    )
    return [p1, p2]


def cmd_prdc(ctx: RunContext, out: Path):
    pcfg = ctx.cfg["prdc"]
    if not pcfg["generated"]:
        raise ConfigurationError("prdc needs prdc.generated pointing at a samples CSV")
    gen_rows = _read_csv(Path(pcfg["generated"]))
    real = gmm_mod.sample_dataset(ctx.fixture, pcfg["n_real"], ctx.rng(_KEY_PRDC))
    gen_x = np.array([[float(r["x0"]), float(r["x1"])] for r in gen_rows])
    if "target_class" in gen_rows[0]:
        gen_y = np.array([int(r["target_class"]) for r in gen_rows])
        result = guidance.prdc_classwise(
            real, gmm_mod.LabeledDataset(gen_x, gen_y), pcfg["k"]
        )
    else:
        result = evaluation.prdc(real.x, gen_x, pcfg["k"])
    p = out / f"prdc_seed{ctx.seed}.json"
    write_json(p, {"k": pcfg["k"], "result": result}, ctx.cfg_hash, ctx.seed)
    return [p]


_SUBCOMMANDS = {
    "train-score": cmd_train_score,
    "train-classifier": cmd_train_classifier,
    "train-guidance": cmd_train_guidance,
    "eval-shift": cmd_eval_shift,
    "eval-de": cmd_eval_de,
    "entropy-curve": cmd_entropy_curve,
    "certify": cmd_certify,
    "ood": cmd_ood,
    "verify-theorem1": cmd_verify_theorem1,
    "decompose-gradient": cmd_decompose_gradient,
    "svd-jacobian": cmd_svd_jacobian,
    "sample": cmd_sample,
    "sample-guided": cmd_sample_guided,
    "prdc": cmd_prdc,
}


# -- report ----------------------------------------------------------------------


def _read_csv(path: Path):
    lines = path.read_text().strip().split("\n")
    body = [ln for ln in lines if not ln.startswith("#")]
    cols = body[0].split(",")
    return [dict(zip(cols, ln.split(","))) for ln in body[1:]]


def _csv_hash(path: Path):
    first = path.read_text().split("\n", 1)[0]
    if first.startswith("# config_hash="):
        return first.split("config_hash=")[1].split()[0]
    return None


def cmd_report(out_dir: Path) -> int:
    manifests = sorted(out_dir.glob("manifest_*.json"))
    if not manifests:
        print(f"warning: no manifests under {out_dir}; nothing to report", file=sys.stderr)
        (out_dir / "summary.json").write_text(json.dumps({"runs": 0}, indent=1) + "\n")
        return 0
    runs = [json.loads(p.read_text()) for p in manifests]
    for run in runs:
        for name in run["outputs"]:
            p = out_dir / name
            if p.suffix == ".csv" and p.exists():
                h = _csv_hash(p)
                if h is not None and h != run["config_hash"]:
                    print(
                        f"error: {name} embeds config_hash={h} but its manifest says "
                        f"{run['config_hash']}; refusing to merge",
                        file=sys.stderr,
                    )
                    return 1

    summary = {"runs": len(runs), "by_subcommand": {}}
    for run in runs:
        summary["by_subcommand"].setdefault(run["subcommand"], 0)
        summary["by_subcommand"][run["subcommand"]] += 1

    _summarize_tables(out_dir, runs, summary)
    _summarize_entropy(out_dir, runs, summary)
    _summarize_certification(out_dir, runs, summary)
    _summarize_json_metrics(out_dir, runs, summary)
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return 0


def _mean_std(vals):
    vals = np.asarray(vals, dtype=np.float64)
    return float(vals.mean()), (float(vals.std(ddof=1)) if vals.size > 1 else 0.0)


def _summarize_tables(out_dir, runs, summary):
    rows = []
    for run in runs:
        if run["subcommand"] not in ("eval-shift", "eval-de"):
            continue
        kind = run["config"]["classifier"]["kind"]
        for name in run["outputs"]:
            if "table" in name:
                for r in _read_csv(out_dir / name):
                    rows.append({**r, "classifier": kind})
    if not rows:
        return
    grouped = {}
    for r in rows:
        key = (r["classifier"], r["shift"], r["severity"], r["mode"])
        grouped.setdefault(key, []).append(float(r["accuracy"]))
    out_rows = [
        {
            "classifier": k[0], "shift": k[1], "severity": k[2], "mode": k[3],
            "n_seeds": len(v), "mean_accuracy": _mean_std(v)[0], "std_accuracy": _mean_std(v)[1],
        }
        for k, v in sorted(grouped.items())
    ]
    path = out_dir / "summary_shift.csv"
    lines = ["classifier,shift,severity,mode,n_seeds,mean_accuracy,std_accuracy"]
    lines += [
        ",".join(_fmt(r[c]) for c in ("classifier", "shift", "severity", "mode", "n_seeds",
                                      "mean_accuracy", "std_accuracy"))
        for r in out_rows
    ]
    path.write_text("\n".join(lines) + "\n")
    # mode x train-augmentation accuracy grid, averaged over shifts and seeds
    grid = {}
    for r in out_rows:
        grid.setdefault((r["classifier"], r["mode"]), []).append(r["mean_accuracy"])
    summary["mode_augmentation_grid"] = {
        f"{clf}/{mode}": float(np.mean(v)) for (clf, mode), v in sorted(grid.items())
    }


def _summarize_entropy(out_dir, runs, summary):
    series = {}
    for run in runs:
        if run["subcommand"] != "entropy-curve":
            continue
        for name in run["outputs"]:
            for r in _read_csv(out_dir / name):
                series.setdefault(float(r["t"]), []).append(float(r["mean_entropy"]))
    if not series:
        return
    rows = [
        {"t": t, "mean_entropy": _mean_std(v)[0], "std_entropy": _mean_std(v)[1]}
        for t, v in sorted(series.items())
    ]
    lines = ["t,mean_entropy,std_entropy"] + [
        ",".join(_fmt(r[c]) for c in ("t", "mean_entropy", "std_entropy")) for r in rows
    ]
    (out_dir / "summary_entropy.csv").write_text("\n".join(lines) + "\n")
    _plot_series(
        out_dir / "entropy_vs_t.svg",
        [r["t"] for r in rows],
        [r["mean_entropy"] for r in rows],
        "diffusion time t", "mean prediction entropy",
    )
    summary["entropy_curve_points"] = len(rows)


def _summarize_certification(out_dir, runs, summary):
    rows = []
    for run in runs:
        if run["subcommand"] != "certify":
            continue
        for name in run["outputs"]:
            rows += _read_csv(out_dir / name)
    if not rows:
        return
    radii = np.array([float(r["radius"]) for r in rows])
    correct = np.array([r["prediction"] == r["y_true"] for r in rows])
    grid = np.linspace(0.0, max(radii.max(), 1e-9), 25)
    acc = [float(np.mean(correct & (radii >= r))) for r in grid]
    lines = ["radius,certified_accuracy"] + [
        f"{_fmt(r)},{_fmt(a)}" for r, a in zip(grid, acc)
    ]
    (out_dir / "summary_certification.csv").write_text("\n".join(lines) + "\n")
    _plot_series(out_dir / "radius_vs_accuracy.svg", grid, acc, "radius", "certified accuracy")
    summary["certified_at_zero"] = acc[0]


def _summarize_json_metrics(out_dir, runs, summary):
    aurocs, purities = [], []
    for run in runs:
        for name in run["outputs"]:
            p = out_dir / name
            if not p.suffix == ".json" or not p.exists():
                continue
            doc = json.loads(p.read_text())
            if name.startswith("ood_summary"):
                aurocs.append(doc["auroc"])
            if name.startswith("guided_summary"):
                purities.append(doc["purity"])
    if aurocs:
        summary["ood_auroc_mean"] = float(np.mean(aurocs))
    if purities:
        summary["guided_purity_mean"] = float(
            np.mean([v for d in purities for v in d.values()])
        )


def _plot_series(path, xs, ys, xlabel, ylabel):
    try:
        import matplotlib

        matplotlib.use("Agg")
        matplotlib.rcParams["svg.hashsalt"] = "diffuselab"
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(xs, ys, marker="o", ms=3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffuselab", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override seeds list")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument(
            "--override", action="append", default=[], metavar="KEY=VALUE",
            help="dotted-path config override (repeatable)",
        )
    rp = sub.add_parser("report")
    rp.add_argument("--out", required=True, help="run directory to aggregate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.subcommand == "report":
            return cmd_report(Path(args.out))
        cfg = cfg_mod.load_config(args.config, args.override, args.seed, args.out)
        out = Path(cfg["output"])
        out.mkdir(parents=True, exist_ok=True)
        fn = _SUBCOMMANDS[args.subcommand]
        for seed in cfg["seeds"]:
            ctx = RunContext(cfg, seed)
            t0 = time.monotonic()
            files = fn(ctx, out)
            write_manifest(out, args.subcommand, cfg, ctx.cfg_hash, seed, files,
                           time.monotonic() - t0)
        return 0
    except (ConfigurationError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
