"""Command-line orchestration: data generation, corruption, training,
evaluation, the component ablation grid, trace verification and the
forward-cost calculator.

Experiment configs are plain sectioned key=value text (diffable provenance,
lossless round-trip); every output file embeds the config hash. One output
directory holds one reproducible experiment:

    config.snapshot     effective config as written
    model_f_init.ckpt   initial forgetting-network parameters
    model_m_init.ckpt   initial memorizing-network parameters (two-net modes)
    model_f.ckpt        final forgetting network (the inference model)
    model_m.ckpt        final memorizing network (two-net modes)
    trace.bin           per-iteration updates (when tracing)
    metrics.jsonl       per-iteration loss/mask/lr log
    memorization.csv    train-accuracy curves (when snapshots are on)
    eval/               rank-1 CSV/JSON and variance statistics
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import io
import json
import math
import os
import sys

import numpy as np

from . import gaitgen, gaugekit
from .cyclic import NonFiniteLossError, TrainerConfig, run_training
from .gaitgen import DatasetBundle
from .setnet import OptimizerConfig, load_checkpoint, save_checkpoint

CONFIG_FORMAT_VERSION = 1

OUT_ROOT_ENV = "CYCLEGAIT_OUT_ROOT"
WORKERS_ENV = "CYCLEGAIT_WORKERS"


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything a full run needs; defaults give the desk-scale benchmark."""

    format_version: int = CONFIG_FORMAT_VERSION
    # dataset
    data_dir: str = ""
    n_ids: int = 60
    n_train_ids: int = 40
    n_views: int = 4
    nm_groups: int = 4
    bg_groups: int = 3
    cl_groups: int = 3
    frames_per_seq: int = 30
    d_in: int = 16
    data_seed: int = 1
    # corruption of the train split
    corruption: str = "none"  # none | label | augmentation | split
    corruption_rate: float = 0.2
    corruption_fraction: float = 0.6
    corruption_seed: int = 7
    # trainer
    mode: str = "cyclic"
    iterations: int = 2000
    p_ids: int = 8
    k_seqs: int = 4
    momentum: float = 0.99
    ema_enabled: bool = True
    and_enabled: bool = False
    detach_teacher: bool = False
    augmentation: str = "default"
    seed: int = 1
    schedule_profile: str = "noisy"
    triplet_margin: float = 0.2
    mil_temperature: float = 0.2
    d_hidden: int = 64
    d_emb: int = 32
    record_trace: bool = False
    snapshot_every: int = 0
    coteach_noise_rate: float = 0.2
    sieve_beta: float = 0.9
    sieve_warmup: int = 200
    sieve_scale: float = 1.5
    sieve_entropy_scale: float = 1.0
    sieve_keep_floor: float = 0.5
    schedule_ramp_fraction: float = 0.5
    sigma0_const: float | None = None
    sigma1_const: float | None = None
    sigma2_const: float | None = None
    sigma3_const: float | None = None
    # optimizer
    opt_kind: str = "sgd"
    lr: float = 0.05
    opt_momentum: float = 0.9
    milestones: tuple = (1000,)
    gamma: float = 0.1
    # evaluation
    exclude_same_view: bool = True
    # output
    out_dir: str = "runs/exp"

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(
            mode=self.mode,
            iterations=self.iterations,
            p_ids=self.p_ids,
            k_seqs=self.k_seqs,
            momentum=self.momentum,
            ema_enabled=self.ema_enabled,
            and_enabled=self.and_enabled,
            detach_teacher=self.detach_teacher,
            augmentation=self.augmentation,
            seed=self.seed,
            schedule_profile=self.schedule_profile,
            triplet_margin=self.triplet_margin,
            mil_temperature=self.mil_temperature,
            d_hidden=self.d_hidden,
            d_emb=self.d_emb,
            record_trace=self.record_trace,
            snapshot_every=self.snapshot_every,
            coteach_noise_rate=self.coteach_noise_rate,
            sieve_beta=self.sieve_beta,
            sieve_warmup=self.sieve_warmup,
            sieve_scale=self.sieve_scale,
            sieve_entropy_scale=self.sieve_entropy_scale,
            sieve_keep_floor=self.sieve_keep_floor,
            schedule_ramp_fraction=self.schedule_ramp_fraction,
            sigma0_const=self.sigma0_const,
            sigma1_const=self.sigma1_const,
            sigma2_const=self.sigma2_const,
            sigma3_const=self.sigma3_const,
            optimizer=OptimizerConfig(
                kind=self.opt_kind,
                lr=self.lr,
                momentum=self.opt_momentum,
                milestones=tuple(self.milestones),
                gamma=self.gamma,
            ),
        )


# section -> ordered field names; parsing and serialization are schema-driven
_SECTIONS = {
    "meta": ("format_version",),
    "dataset": (
        "data_dir", "n_ids", "n_train_ids", "n_views", "nm_groups", "bg_groups",
        "cl_groups", "frames_per_seq", "d_in", "data_seed",
    ),
    "corruption": ("corruption", "corruption_rate", "corruption_fraction", "corruption_seed"),
    "trainer": (
        "mode", "iterations", "p_ids", "k_seqs", "momentum", "ema_enabled",
        "and_enabled", "detach_teacher", "augmentation", "seed", "schedule_profile",
        "triplet_margin", "mil_temperature", "d_hidden", "d_emb", "record_trace",
        "snapshot_every", "coteach_noise_rate", "sieve_beta", "sieve_warmup",
        "sieve_scale", "sigma0_const", "sigma1_const", "sigma2_const", "sigma3_const",
    ),
    "optimizer": ("opt_kind", "lr", "opt_momentum", "milestones", "gamma"),
    "eval": ("exclude_same_view",),
    "output": ("out_dir",),
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _format_value(name: str, value) -> str:
    if name == "milestones":
        return ",".join(str(int(v)) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, text: str):
    text = text.strip()
    if name == "milestones":
        return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()
    ftype = _FIELD_TYPES[name]
    if ftype in ("float | None",):
        return None if text == "none" else float(text)
    if ftype == "bool":
        if text not in ("true", "false"):
            raise ValueError(f"{name} must be true or false, got {text!r}")
        return text == "true"
    if ftype == "int":
        return int(text)
    if ftype == "float":
        return float(text)
    return text


def serialize_config(cfg: ExperimentConfig) -> str:
    out = io.StringIO()
    for section, names in _SECTIONS.items():
        out.write(f"[{section}]\n")
        for name in names:
            out.write(f"{name} = {_format_value(name, getattr(cfg, name))}\n")
        out.write("\n")
    return out.getvalue()


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    values = {}
    known = {name: section for section, names in _SECTIONS.items() for name in names}
    for section in parser.sections():
        for name, raw in parser.items(section):
            if name not in known:
                raise ValueError(f"unknown config key {name!r} in [{section}]")
            if known[name] != section:
                raise ValueError(f"key {name!r} belongs in [{known[name]}]")
            values[name] = _parse_value(name, raw)
    cfg = ExperimentConfig(**values)
    if cfg.format_version != CONFIG_FORMAT_VERSION:
        raise ValueError(f"unsupported config format_version {cfg.format_version}")
    return cfg


def load_config_file(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV, "")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# dataset plumbing


def build_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    """Generate (and corrupt) the dataset described by the config."""
    bundle = gaitgen.make_benchmark(
        n_ids=cfg.n_ids,
        n_train_ids=cfg.n_train_ids,
        n_views=cfg.n_views,
        condition_groups={"NM": cfg.nm_groups, "BG": cfg.bg_groups, "CL": cfg.cl_groups},
        frames_per_seq=cfg.frames_per_seq,
        d_in=cfg.d_in,
        seed=cfg.data_seed,
    )
    if cfg.corruption != "none":
        amount = cfg.corruption_fraction if cfg.corruption == "split" else cfg.corruption_rate
        bundle = gaitgen.corrupt_bundle(bundle, cfg.corruption, amount, cfg.corruption_seed)
    return bundle


def obtain_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    """Load the dataset from data_dir when set, else generate it in memory."""
    if cfg.data_dir:
        return gaitgen.load_bundle(cfg.data_dir)
    return build_bundle(cfg)


def _manifest_with_hash(manifest: dict) -> dict:
    manifest = dict(manifest)
    manifest.pop("config_hash", None)
    digest = hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode("utf-8")
    ).hexdigest()
    manifest["config_hash"] = digest
    return manifest


def write_dataset(bundle: DatasetBundle, outdir: str):
    bundle = DatasetBundle(bundle.train, bundle.test, _manifest_with_hash(bundle.manifest))
    gaitgen.save_bundle(
        bundle, outdir, extra_header={"config_hash": bundle.manifest["config_hash"]}
    )


# ---------------------------------------------------------------------------
# training / evaluation pipelines


def _write_metrics(path: str, metrics: list, digest: str):
    def clean(obj):
        return {
            k: (None if isinstance(v, float) and not math.isfinite(v) else v)
            for k, v in obj.items()
        }

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config_hash": digest, "format_version": 1}) + "\n")
        for row in metrics:
            fh.write(json.dumps(clean(row), sort_keys=True) + "\n")


def _write_csv(path: str, text: str, digest: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={digest}\n")
        fh.write(text)


def run_experiment(cfg: ExperimentConfig, bundle: DatasetBundle | None = None):
    """Train per config, persist the run directory, return (result, outdir)."""
    outdir = _resolve_out(cfg.out_dir)
    os.makedirs(outdir, exist_ok=True)
    digest = config_hash(cfg)
    with open(os.path.join(outdir, "config.snapshot"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={digest}\n")
        fh.write(serialize_config(cfg))

    if bundle is None:
        bundle = obtain_bundle(cfg)
    trainer_cfg = cfg.trainer_config()
    trace_path = os.path.join(outdir, "trace.bin") if cfg.record_trace else None

    try:
        result = run_training(bundle, trainer_cfg, trace_path=trace_path)
    except NonFiniteLossError as err:
        diag_path = os.path.join(outdir, "diagnostics.json")
        with open(diag_path, "w", encoding="utf-8") as fh:
            json.dump({"config_hash": digest, **err.diagnostics}, fh, indent=2)
        raise

    extra = {"config_hash": digest}
    save_checkpoint(os.path.join(outdir, "model_f_init.ckpt"), result.init_f, extra)
    save_checkpoint(os.path.join(outdir, "model_f.ckpt"), result.params_f, extra)
    if result.params_m is not None:
        save_checkpoint(os.path.join(outdir, "model_m_init.ckpt"), result.init_m, extra)
        save_checkpoint(os.path.join(outdir, "model_m.ckpt"), result.params_m, extra)
    _write_metrics(os.path.join(outdir, "metrics.jsonl"), result.metrics, digest)

    if result.snapshots:
        curve = gaugekit.memorization_curve(result.snapshots, bundle.train)
        rows = ["iteration,clean_accuracy,noisy_accuracy"]
        for it, clean_acc, noisy_acc in curve.rows():
            noisy_txt = "" if noisy_acc is None else f"{noisy_acc:.6f}"
            rows.append(f"{it},{clean_acc:.6f},{noisy_txt}")
        _write_csv(os.path.join(outdir, "memorization.csv"), "\n".join(rows) + "\n", digest)
    return result, outdir


def evaluate_to_dir(params, test_samples, outdir: str, digest: str,
                    exclude_same_view: bool = True):
    """Write rank1.csv / rank1.json / variance.csv for a checkpoint."""
    os.makedirs(outdir, exist_ok=True)
    report = gaugekit.evaluate_checkpoint(params, test_samples, exclude_same_view)
    _write_csv(os.path.join(outdir, "rank1.csv"), report.to_csv_text(), digest)
    with open(os.path.join(outdir, "rank1.json"), "w", encoding="utf-8") as fh:
        json.dump({"config_hash": digest, **report.to_json_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    z, _ = gaugekit.embed_samples(params, test_samples)
    stats = gaugekit.variance_stats(
        z, [s.identity for s in test_samples], [s.condition for s in test_samples]
    )
    lines = ["statistic,value"] + [f"{k},{v:.9f}" for k, v in stats.as_dict().items()]
    _write_csv(os.path.join(outdir, "variance.csv"), "\n".join(lines) + "\n", digest)
    return report


# ---------------------------------------------------------------------------
# ablation grid


# The supervised-family rows train with the plain constant-weight recipe;
# the coefficient ramp schedule is part of the noise-tolerant method and is
# applied only to rows that include the consistency loss.
ABLATION_CELLS = (
    ("supervised", {"mode": "supervised", "and_enabled": False,
                    "schedule_profile": "clean"}),
    ("supervised+cyclic", {"mode": "cyclic", "ema_enabled": True, "and_enabled": False,
                           "sigma0_const": 0.0, "sigma3_const": 0.0,
                           "schedule_profile": "clean"}),
    ("supervised+cyclic+and", {"mode": "cyclic", "ema_enabled": True, "and_enabled": True,
                               "sigma0_const": 0.0, "sigma3_const": 0.0,
                               "schedule_profile": "clean"}),
    ("selfsup", {"mode": "selfsup", "ema_enabled": False, "and_enabled": False,
                 "schedule_profile": "noisy"}),
    ("selfsup+cyclic", {"mode": "selfsup", "ema_enabled": True, "and_enabled": False,
                        "schedule_profile": "noisy"}),
    ("full-no-cyclic", {"mode": "cyclic", "ema_enabled": False, "and_enabled": False,
                        "schedule_profile": "noisy"}),
    ("full-no-and", {"mode": "cyclic", "ema_enabled": True, "and_enabled": False,
                     "schedule_profile": "noisy"}),
    ("full", {"mode": "cyclic", "ema_enabled": True, "and_enabled": True,
              "schedule_profile": "noisy"}),
)


def _ablation_cell_job(args):
    cfg_dict, bundle_manifest, cell_name, overrides, seed = args
    bundle = gaitgen.regenerate_from_manifest(bundle_manifest)
    cfg = ExperimentConfig(**{**cfg_dict, **overrides, "seed": seed})
    result = run_training(bundle, cfg.trainer_config())
    report = gaugekit.evaluate_checkpoint(
        result.params_f, bundle.test, cfg.exclude_same_view
    )
    means = {c: report.condition_means.get(c, float("nan")) for c in ("NM", "BG", "CL")}
    return cell_name, seed, means, report.overall_mean


def run_ablation(cfg: ExperimentConfig, bundle: DatasetBundle, seeds) -> dict:
    """Train and evaluate every grid cell for every seed; returns
    {cell: {condition: (mean, std)}} plus raw per-seed values under "raw"."""
    jobs = []
    cfg_dict = dataclasses.asdict(cfg)
    for cell_name, overrides in ABLATION_CELLS:
        for seed in seeds:
            jobs.append((cfg_dict, bundle.manifest, cell_name, overrides, seed))

    workers = _workers()
    if workers > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_ablation_cell_job, jobs))
    else:
        outcomes = [_ablation_cell_job(j) for j in jobs]

    raw: dict = {}
    for cell_name, seed, means, overall in outcomes:
        raw.setdefault(cell_name, []).append((seed, means, overall))

    table = {}
    for cell_name, rows in raw.items():
        entry = {}
        for cond in ("NM", "BG", "CL"):
            vals = np.array([r[1][cond] for r in rows])
            entry[cond] = (float(vals.mean()), float(vals.std()))
        overall = np.array([r[2] for r in rows])
        entry["overall"] = (float(overall.mean()), float(overall.std()))
        table[cell_name] = entry
    return {"table": table, "raw": raw}


def ablation_csv(table: dict) -> str:
    header = "cell,nm_mean,nm_std,bg_mean,bg_std,cl_mean,cl_std,overall_mean,overall_std"
    lines = [header]
    for cell_name, _ in ABLATION_CELLS:
        e = table[cell_name]
        lines.append(
            f"{cell_name},"
            + ",".join(
                f"{e[c][0]:.4f},{e[c][1]:.4f}" for c in ("NM", "BG", "CL", "overall")
            )
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def _refuse_existing(path: str, force: bool, what: str):
    if os.path.exists(path) and not force:
        raise SystemExit(f"{what} {path} already exists; pass --force to overwrite")


def cmd_gen_data(args) -> int:
    cfg = ExperimentConfig(
        n_ids=args.ids,
        n_train_ids=args.train_ids,
        n_views=args.views,
        nm_groups=args.nm,
        bg_groups=args.bg,
        cl_groups=args.cl,
        frames_per_seq=args.frames,
        d_in=args.d_in,
        data_seed=args.seed,
        corruption=args.corrupt,
        corruption_rate=args.rate,
        corruption_fraction=args.fraction,
        corruption_seed=args.corrupt_seed,
    )
    outdir = _resolve_out(args.out)
    _refuse_existing(os.path.join(outdir, "manifest.json"), args.force, "dataset")
    bundle = build_bundle(cfg)
    write_dataset(bundle, outdir)
    n_flagged = sum(1 for s in bundle.train if s.noise_flag != "clean")
    print(f"wrote {outdir}: {len(bundle.train)} train / {len(bundle.test)} test sequences")
    print(f"train identities: {len(set(s.identity for s in bundle.train))}, "
          f"flagged noisy: {n_flagged}")
    return 0


def cmd_corrupt(args) -> int:
    bundle = gaitgen.load_bundle(args.data)
    outdir = _resolve_out(args.out)
    _refuse_existing(os.path.join(outdir, "manifest.json"), args.force, "dataset")
    amount = args.fraction if args.mode == "split" else args.rate
    bundle = gaitgen.corrupt_bundle(bundle, args.mode, amount, args.seed)
    write_dataset(bundle, outdir)
    n_flagged = sum(1 for s in bundle.train if s.noise_flag != "clean")
    print(f"wrote {outdir}: {n_flagged} train sequences flagged {args.mode}")
    return 0


_TRAIN_OVERRIDES = (
    ("data", "data_dir"),
    ("out", "out_dir"),
    ("mode", "mode"),
    ("iterations", "iterations"),
    ("seed", "seed"),
    ("schedule", "schedule_profile"),
    ("snapshot_every", "snapshot_every"),
)


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config_file(args.config) if args.config else ExperimentConfig()
    updates = {}
    for arg_name, field_name in _TRAIN_OVERRIDES:
        val = getattr(args, arg_name, None)
        if val is not None:
            updates[field_name] = val
    if getattr(args, "trace", False):
        updates["record_trace"] = True
    if getattr(args, "and_module", None) is not None:
        updates["and_enabled"] = args.and_module
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    return cfg


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    outdir = _resolve_out(cfg.out_dir)
    _refuse_existing(os.path.join(outdir, "model_f.ckpt"), args.force, "run")
    try:
        result, outdir = run_experiment(cfg)
    except NonFiniteLossError as err:
        print(f"aborted: {err} (diagnostics written)", file=sys.stderr)
        return 1
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {cfg.mode} for {cfg.iterations} iterations "
          f"({result.forward_count} forwards) -> {outdir}")
    if last:
        print(f"final losses: combined={last['l_crc']:.4f} ce={last['l_ce']:.4f} "
              f"kept={last['kept_fraction']:.3f}")
    return 0


def cmd_eval(args) -> int:
    params, header = load_checkpoint(args.checkpoint)
    bundle = gaitgen.load_bundle(args.data)
    digest = header.get("config_hash", "unknown")
    outdir = _resolve_out(args.out) if args.out else os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), "eval"
    )
    report = evaluate_to_dir(
        params, bundle.test, outdir, digest, exclude_same_view=args.exclude_same_view
    )
    print(f"rank-1 means: " + ", ".join(
        f"{c}={report.condition_means[c]:.2f}" for c in report.conditions
    ) + f", overall={report.overall_mean:.2f}")
    print(f"wrote {outdir}")
    return 0


def cmd_ablate(args) -> int:
    bundle = gaitgen.load_bundle(args.data)
    base = ExperimentConfig(
        data_dir=args.data,
        iterations=args.iterations,
    )
    seeds = [args.seed + i for i in range(args.seeds)]
    outcome = run_ablation(base, bundle, seeds)
    outdir = _resolve_out(args.out)
    os.makedirs(outdir, exist_ok=True)
    digest = config_hash(base)
    _write_csv(os.path.join(outdir, "ablation.csv"), ablation_csv(outcome["table"]), digest)
    print(f"{'cell':<24}{'NM':>16}{'BG':>16}{'CL':>16}")
    for cell_name, _ in ABLATION_CELLS:
        e = outcome["table"][cell_name]
        print(f"{cell_name:<24}" + "".join(
            f"{e[c][0]:>9.2f}±{e[c][1]:<6.2f}" for c in ("NM", "BG", "CL")
        ))
    print(f"wrote {os.path.join(outdir, 'ablation.csv')}")
    return 0


def cmd_verify_closed_form(args) -> int:
    if args.run:
        run_dir = args.run
        trace = os.path.join(run_dir, "trace.bin")
        init_f, _ = load_checkpoint(os.path.join(run_dir, "model_f_init.ckpt"))
        init_m, _ = load_checkpoint(os.path.join(run_dir, "model_m_init.ckpt"))
        final_f, _ = load_checkpoint(os.path.join(run_dir, "model_f.ckpt"))
        final_m, _ = load_checkpoint(os.path.join(run_dir, "model_m.ckpt"))
    else:
        trace = args.trace
        init_f, _ = load_checkpoint(args.init_f)
        init_m, _ = load_checkpoint(args.init_m)
        final_f = final_m = None
    try:
        report = gaugekit.verify_trace_file(trace, init_f, init_m, final_f, final_m)
    except (OSError, ValueError) as err:
        print(f"FAIL: {err}", file=sys.stderr)
        return 2
    ok = report["max_relative_deviation"] <= args.tolerance
    for key in ("endpoint_f_matches", "endpoint_m_matches"):
        if key in report:
            ok = ok and report[key]
    print(f"iterations={report['iterations']} params={report['n_params']} "
          f"momentum={report['momentum']}")
    print(f"max relative deviation: {report['max_relative_deviation']:.3e} "
          f"(tolerance {args.tolerance:.1e})")
    for key in ("endpoint_f_matches", "endpoint_m_matches"):
        if key in report:
            print(f"{key}: {report[key]}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_cost(args) -> int:
    coteach, with_aug, without = gaugekit.cost_model(args.batch, args.noise_rate)
    print(f"small-loss co-teaching forwards/iter: {coteach:g}")
    print(f"two-network scheme with augmentation: {with_aug:g}")
    print(f"two-network scheme without augmentation: {without:g}")
    print(f"speedup vs with-augmentation: {100.0 * (coteach / with_aug - 1.0):.0f}%")
    print(f"speedup vs without-augmentation: {100.0 * (coteach / without - 1.0):.0f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclegait",
        description="cyclic two-network noise-tolerant training benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=60)
    p.add_argument("--train-ids", dest="train_ids", type=int, default=40)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--nm", type=int, default=4)
    p.add_argument("--bg", type=int, default=3)
    p.add_argument("--cl", type=int, default=3)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--d-in", dest="d_in", type=int, default=16)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--corrupt", choices=("none", "label", "augmentation", "split"),
                   default="none")
    p.add_argument("--rate", type=float, default=0.2)
    p.add_argument("--fraction", type=float, default=0.6)
    p.add_argument("--corrupt-seed", dest="corrupt_seed", type=int, default=7)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("corrupt", help="corrupt the train split of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("label", "augmentation", "split"), required=True)
    p.add_argument("--rate", type=float, default=0.2)
    p.add_argument("--fraction", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("--config", default=None, help="experiment config file")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--out", default=None)
    p.add_argument("--mode", choices=("cyclic", "supervised", "selfsup", "coteach-baseline"),
                   default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--schedule", choices=("noisy", "clean"), default=None)
    p.add_argument("--snapshot-every", dest="snapshot_every", type=int, default=None)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--and", dest="and_module", action="store_true", default=None)
    p.add_argument("--no-and", dest="and_module", action="store_false")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank-1 retrieval evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--exclude-same-view", dest="exclude_same_view",
                   action="store_true", default=True)
    p.add_argument("--include-same-view", dest="exclude_same_view", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the component ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--seed", type=int, default=1, help="first seed of the range")
    p.add_argument("--iterations", type=int, default=2000)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify-closed-form",
                       help="check a training trace against the EMA closed form")
    p.add_argument("--run", default=None, help="run directory with trace + checkpoints")
    p.add_argument("--trace", default=None)
    p.add_argument("--init-f", dest="init_f", default=None)
    p.add_argument("--init-m", dest="init_m", default=None)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.set_defaults(func=cmd_verify_closed_form)

    p = sub.add_parser("cost", help="forward-pass cost model")
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--noise-rate", dest="noise_rate", type=float, default=0.0)
    p.set_defaults(func=cmd_cost)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify-closed-form" and not args.run and not (
        args.trace and args.init_f and args.init_m
    ):
        print("need --run or all of --trace/--init-f/--init-m", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
