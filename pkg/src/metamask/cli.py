"""Command-line entry point: JSON experiment configs, orchestration of
train / eval / study modes, and metrics emission.

Every run materializes its defaults into summary.json together with the
seed, so a run can be reproduced from its own output. Exit codes:
0 success, 2 config violation, 3 training divergence, 4 IO failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from dataclasses import asdict

from . import evaluation as ev
from . import nn
from .data import Dataset, SyntheticSpec, load_dataset, make_synthetic
from .errors import ConfigError, DivergenceError, ParseError
from .losses import ContrastiveConfig, DrrConfig
from .meta_opt import Ablation, OptimConfig, TrainConfig, train

MODES = ("train", "eval", "random_mask_study", "learned_mask_study",
         "dim_sweep", "alpha_sweep")

DEFAULT_CONFIG = {
    "mode": "train",
    "seed": 0,
    "output_dir": None,
    "params_dir": None,
    "batch_size": 64,
    "model": {
        "d_in": None,  # default: the data's input width
        "repr_dim": 32,
        "head_dim": 64,
        "encoder_hidden": [],
        "head_hidden": [],
    },
    "optim": {
        "lr_main": 3e-5,
        "lr_trial_theta": None,
        "lr_trial_vartheta": None,
        "lr_mask": 0.01,
        "momentum": 0.9,
        "schedule": "cosine_annealing",
        "total_steps": 1000,
        "alpha": 100.0,
    },
    "contrastive": {
        "temperature": 0.5,
        "similarity": "cosine",
        "include_positive_in_denominator": True,
    },
    "drr": {"lambda": 0.005, "standardize": False},
    "ablation": {
        "no_meta": False,
        "no_drr": False,
        "contrastive_only": False,
        "drr_only": False,
    },
    "data": {
        "manifest": None,
        "synthetic": {
            "n_samples": 2000,
            "n_classes": 4,
            "d_signal": 4,
            "d_confounder": 8,
            "d_noise": 4,
            "class_sep": 6.0,
            "signal_offset_sigma": 0.3,
            "view_noise_sigma": 0.25,
            "confounder_sigma": 5.0,
            "confounder_modes": 2,
            "n_views": 2,
            "seed": 0,
        },
    },
    "eval": {"k": 5, "test_fraction": 0.5, "eval_on_masked": False},
    "study": {
        "mask_rates": [0.0, 0.1, 0.2, 0.3, 0.5],
        "trials_per_rate": 20,
        "head_widths": [16, 64, 256, 1024],
        "alphas": [0.1, 1.0, 10.0, 100.0, 1000.0],
    },
}


def _merge_with_defaults(defaults, given, path, diagnostics):
    """Overlay ``given`` on ``defaults``, flagging unknown fields with
    their dotted path."""
    merged = copy.deepcopy(defaults)
    for key, value in given.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            diagnostics.append({"field": here, "message": "unknown field"})
            continue
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = _merge_with_defaults(defaults[key], value, here, diagnostics)
        else:
            merged[key] = value
    return merged


def _type_check(cfg, diagnostics):
    def flag(field, message):
        diagnostics.append({"field": field, "message": message})

    if cfg["mode"] not in MODES:
        flag("mode", f"must be one of {MODES}")
    if cfg["output_dir"] is None:
        flag("output_dir", "required")
    if not isinstance(cfg["seed"], int):
        flag("seed", "must be an integer")
    if not (isinstance(cfg["batch_size"], int) and cfg["batch_size"] >= 1):
        flag("batch_size", "must be a positive integer")
    data = cfg["data"]
    if data["manifest"] is not None and not os.path.exists(data["manifest"]):
        flag("data.manifest", f"path does not exist: {data['manifest']}")
    if cfg["params_dir"] is not None and not os.path.isdir(cfg["params_dir"]):
        flag("params_dir", f"directory does not exist: {cfg['params_dir']}")
    if data["manifest"] is None:
        syn = data["synthetic"]
        if cfg["batch_size"] > syn["n_samples"]:
            flag("batch_size",
                 f"batch_size {cfg['batch_size']} exceeds data.synthetic.n_samples "
                 f"{syn['n_samples']}")
        d_in = syn["d_signal"] + syn["d_confounder"] + syn["d_noise"]
        if cfg["model"]["d_in"] is not None and cfg["model"]["d_in"] != d_in:
            flag("model.d_in",
                 f"model.d_in {cfg['model']['d_in']} != synthetic input width {d_in}")
    if cfg["mode"] == "eval" and cfg["params_dir"] is None:
        flag("params_dir", "required for mode=eval")


def validate_config(raw: dict):
    """Returns (resolved_config, diagnostics)."""
    diagnostics = []
    if not isinstance(raw, dict):
        return None, [{"field": "", "message": "config must be a JSON object"}]
    cfg = _merge_with_defaults(DEFAULT_CONFIG, raw, "", diagnostics)
    _type_check(cfg, diagnostics)
    return cfg, diagnostics


def _parse_set(assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, _, raw = assignment.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _apply_override(raw: dict, key: str, value):
    parts = key.split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override through non-object field {part!r}")
    node[parts[-1]] = value


def build_dataset(cfg: dict) -> Dataset:
    if cfg["data"]["manifest"] is not None:
        return load_dataset(cfg["data"]["manifest"])
    return make_synthetic(SyntheticSpec(**cfg["data"]["synthetic"]))


def build_train_config(cfg: dict, dataset: Dataset) -> TrainConfig:
    m = cfg["model"]
    d_in = m["d_in"] if m["d_in"] is not None else dataset.d_in
    model = nn.ModelSpec.default(
        d_in=d_in,
        repr_dim=m["repr_dim"],
        head_dim=m["head_dim"],
        encoder_hidden=tuple(m["encoder_hidden"]),
        head_hidden=tuple(m["head_hidden"]),
    )
    o = cfg["optim"]
    drr_kwargs = dict(cfg["drr"])
    drr_kwargs["lam"] = drr_kwargs.pop("lambda")
    return TrainConfig(
        model=model,
        optim=OptimConfig(**o),
        contrastive=ContrastiveConfig(**cfg["contrastive"]),
        drr=DrrConfig(**drr_kwargs),
        ablation=Ablation(**cfg["ablation"]),
        batch_size=cfg["batch_size"],
    )


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("METAMASK_THREADS", "1")))
    except ValueError:
        return 1


def _write_json(path, payload) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _train_or_load(cfg, dataset, out_dir):
    """Returns (params, records, train_cfg); loads a snapshot when
    params_dir is given, otherwise trains and saves one."""
    train_cfg = build_train_config(cfg, dataset)
    if cfg["params_dir"] is not None:
        params, _ = nn.load_params(cfg["params_dir"])
        return params, [], train_cfg
    report_path = os.path.join(out_dir, "report.jsonl")
    with open(report_path, "w") as report:
        def emit(record):
            report.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

        params, records = train(train_cfg, dataset, cfg["seed"], report_cb=emit)
    nn.save_params(os.path.join(out_dir, "params"), params, train_cfg.model)
    return params, records, train_cfg


def _knn_accuracy(params, dataset, cfg):
    rep_set = ev.representations(params, dataset, masked=cfg["eval"]["eval_on_masked"])
    tr, te = ev.split_representations(rep_set.reps, rep_set.labels, cfg["seed"],
                                      cfg["eval"]["test_fraction"])
    return ev.knn_eval(tr, te, cfg["eval"]["k"])


def run_experiment(cfg: dict) -> dict:
    """Execute the configured mode; returns the summary payload."""
    out_dir = cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    dataset = build_dataset(cfg)
    summary = {"config": cfg, "seed": cfg["seed"], "mode": cfg["mode"]}
    mode = cfg["mode"]
    threads = _threads()

    if mode == "train":
        params, records, train_cfg = _train_or_load(cfg, dataset, out_dir)
        mask = params.mask.array
        summary["final"] = {
            "loss_drr": records[-1].loss_drr if records else None,
            "loss_contrast": records[-1].loss_contrast if records else None,
            "loss_meta": records[-1].loss_meta if records else None,
            "mask_mean": float(mask.mean()),
            "mask_min": float(mask.min()),
            "mask_max": float(mask.max()),
            "knn_accuracy": _knn_accuracy(params, dataset, cfg),
        }

    elif mode == "eval":
        params, _ = nn.load_params(cfg["params_dir"])
        rep_set = ev.representations(params, dataset,
                                     masked=cfg["eval"]["eval_on_masked"])
        tr, te = ev.split_representations(rep_set.reps, rep_set.labels,
                                          cfg["seed"], cfg["eval"]["test_fraction"])
        t2 = ev.theorem2_check(params, dataset)
        summary["final"] = {
            "knn_accuracy": ev.knn_eval(tr, te, cfg["eval"]["k"]),
            "linear_probe_accuracy": ev.linear_probe(tr, te),
            "phi_masked": t2.phi_masked,
            "phi_unmasked": t2.phi_unmasked,
        }
        from .tensor import Tensor, save_mmt1
        save_mmt1(os.path.join(out_dir, "representations.mmt"),
                  Tensor._wrap(rep_set.reps))

    elif mode == "random_mask_study":
        params, _, _ = _train_or_load(cfg, dataset, out_dir)
        rep_set = ev.representations(params, dataset)
        results = ev.random_mask_study(
            rep_set.reps, rep_set.labels, cfg["study"]["mask_rates"],
            cfg["study"]["trials_per_rate"], k=cfg["eval"]["k"],
            seed=cfg["seed"], threads=threads)
        rows = [("random_mask", r.mask_rate, t, acc, r.baseline)
                for r in results for t, acc in enumerate(r.accuracies)]
        _write_csv(os.path.join(out_dir, "random_mask_study.csv"),
                   ("study", "rate_or_width", "trial", "accuracy", "baseline"), rows)
        summary["final"] = {
            "baseline": results[0].baseline if results else None,
            "best_by_rate": {str(r.mask_rate): max(r.accuracies, default=None)
                             for r in results},
        }

    elif mode == "learned_mask_study":
        params, _, _ = _train_or_load(cfg, dataset, out_dir)
        report = ev.learned_mask_study(
            params, dataset, cfg["study"]["mask_rates"],
            cfg["study"]["trials_per_rate"], k=cfg["eval"]["k"],
            seed=cfg["seed"], threads=threads)
        rows = [("learned_mask", r.mask_rate, t, acc, r.baseline)
                for r in report.results for t, acc in enumerate(r.accuracies)]
        _write_csv(os.path.join(out_dir, "learned_mask_study.csv"),
                   ("study", "rate_or_width", "trial", "accuracy", "baseline"), rows)
        summary["final"] = {
            "below_average_dims": report.below_average_dims.tolist(),
            "degenerate_split": report.degenerate_split,
        }

    elif mode == "dim_sweep":
        train_cfg = build_train_config(cfg, dataset)
        rows = ev.dimension_sweep(train_cfg, dataset, cfg["study"]["head_widths"],
                                  cfg["seed"], k=cfg["eval"]["k"])
        _write_csv(os.path.join(out_dir, "dim_sweep.csv"),
                   ("study", "rate_or_width", "trial", "accuracy", "baseline"),
                   [("dim_sweep:" + r.variant, r.width, 0, r.accuracy, "") for r in rows])
        summary["final"] = {"rows": [asdict(r) for r in rows]}

    elif mode == "alpha_sweep":
        results = []
        for alpha in cfg["study"]["alphas"]:
            sub = copy.deepcopy(cfg)
            sub["optim"]["alpha"] = float(alpha)
            train_cfg = build_train_config(sub, dataset)
            params, _ = train(train_cfg, dataset, cfg["seed"])
            results.append((float(alpha), _knn_accuracy(params, dataset, cfg)))
        _write_csv(os.path.join(out_dir, "alpha_sweep.csv"),
                   ("study", "rate_or_width", "trial", "accuracy", "baseline"),
                   [("alpha_sweep", a, 0, acc, "") for a, acc in results])
        summary["final"] = {"accuracy_by_alpha": {str(a): acc for a, acc in results}}

    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def _fail(code: int, kind: str, message: str, **extra) -> int:
    payload = {"error": kind, "message": message}
    payload.update(extra)
    print(json.dumps(payload, sort_keys=True))
    return code


def cmd_validate(config_path: str, overrides) -> int:
    try:
        with open(config_path) as f:
            raw = json.load(f)
        for assignment in overrides:
            key, value = _parse_set(assignment)
            _apply_override(raw, key, value)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        return _fail(2, "config", str(exc))
    _, diagnostics = validate_config(raw)
    print(json.dumps({"diagnostics": diagnostics}, sort_keys=True))
    return 2 if diagnostics else 0


def cmd_run(config_path: str, overrides) -> int:
    try:
        with open(config_path) as f:
            raw = json.load(f)
        for assignment in overrides:
            key, value = _parse_set(assignment)
            _apply_override(raw, key, value)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        return _fail(2, "config", str(exc))
    cfg, diagnostics = validate_config(raw)
    if diagnostics:
        return _fail(2, "config", "invalid configuration", diagnostics=diagnostics)

    out_dir = cfg["output_dir"]
    lock_path = os.path.join(out_dir, ".lock")
    try:
        os.makedirs(out_dir, exist_ok=True)
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except OSError as exc:
        return _fail(4, "io", f"cannot lock output directory: {exc}")
    try:
        run_experiment(cfg)
        return 0
    except DivergenceError as exc:
        return _fail(3, "divergence", str(exc), step=exc.step)
    except (ParseError, ConfigError) as exc:
        return _fail(2, "config", str(exc))
    except OSError as exc:
        return _fail(4, "io", str(exc))
    finally:
        os.close(lock_fd)
        os.unlink(lock_path)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="metamask",
        description="Meta-learned dimensional masking experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "validate"):
        p = sub.add_parser(name)
        p.add_argument("config", help="path to a JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config field")
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.overrides)
    return cmd_validate(args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
