"""Experiment driver: generate data, train, query, evaluate, diagnose.

Every run is determined by one JSON config (see DEFAULTS for the schema
and the defaults) and writes its resolved config next to its outputs, so
any result directory can be reproduced from what it contains.  Exit
codes: 0 ok, 2 validation failure, 3 training divergence, 4 a hard
diagnostic check failed.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .counterfactual import CounterfactualQuery, answer_query
from .diagnostics import (
    conditional_independence_test,
    independence_test,
    monotonicity_check,
    variability_bc,
    variability_iv,
)
from .estimator import BgmEstimator
from .evaluate import MetricsReport, eval_abr, eval_ellipse
from .flows import ConditionalBijection
from .networks import FORMAT_NAME as NETWORK_FORMAT
from .networks import StructuredGenerativeNetwork
from .scm import Dataset, get_scm
from .training import TrainConfig, TrainingDivergedError

DEFAULTS: dict = {
    "scm": {"name": "ellipse", "n": 101_000, "seed": 1, "options": {}},
    "structure": {"kind": "bc", "dgm_variant": "a"},
    "flow": {"bins": 16, "bound": 3.0, "hidden": [64, 64], "layers": None,
             "aux_mode": "flow"},
    "train": {"lr": 1e-3, "lr_final": None, "batch_size": 4096,
              "max_epochs": 200, "window": 20, "tol": 1e-4, "seed": 0,
              "checkpoint_every": 0, "resume": False, "verbose": False},
    "eval": {"sweep_k": 64, "held_out": 0.01, "baselines": True,
             "x_new": None, "seed": 0},
    "out_dir": "runs/experiment",
}


@dataclass
class ExperimentConfig:
    """Resolved experiment description; fully determines a run."""

    scm: dict = field(default_factory=dict)
    structure: dict = field(default_factory=dict)
    flow: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    out_dir: str = DEFAULTS["out_dir"]

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        merged = copy.deepcopy(DEFAULTS)
        for section, value in doc.items():
            if section not in merged:
                raise ValueError(f"unknown config section {section!r}; "
                                 f"valid: {sorted(merged)}")
            if isinstance(merged[section], dict):
                if not isinstance(value, dict):
                    raise ValueError(f"config section {section!r} must be an object")
                for key in value:
                    if key not in merged[section]:
                        raise ValueError(
                            f"unknown key {section}.{key}; "
                            f"valid: {sorted(merged[section])}")
                merged[section].update(value)
            else:
                merged[section] = value
        return cls(**merged)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self, **overrides) -> TrainConfig:
        keys = ("lr", "lr_final", "batch_size", "max_epochs", "window",
                "tol", "seed", "verbose")
        base = {k: self.train[k] for k in keys}
        base.update(overrides)
        return TrainConfig(**base)

    def estimator(self) -> BgmEstimator:
        return BgmEstimator(
            structure=self.structure["kind"],
            dgm_variant=self.structure["dgm_variant"],
            bins=self.flow["bins"], bound=self.flow["bound"],
            hidden=tuple(self.flow["hidden"]), layers=self.flow["layers"],
            aux_mode=self.flow["aux_mode"], lr=self.train["lr"],
            lr_final=self.train["lr_final"],
            batch_size=self.train["batch_size"],
            max_epochs=self.train["max_epochs"], window=self.train["window"],
            tol=self.train["tol"], seed=self.train["seed"],
            verbose=self.train["verbose"])

    def split(self, frame):
        """Training head and held-out tail by the eval.held_out fraction."""
        n_eval = int(round(self.eval["held_out"] * len(frame)))
        n_eval = min(max(n_eval, 1), len(frame) - 1)
        return frame.iloc[:-n_eval], frame.iloc[-n_eval:]


def _apply_override(doc: dict, spec: str) -> None:
    if "=" not in spec:
        raise ValueError(f"override must look like section.key=value, got {spec!r}")
    path, raw = spec.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings need no quotes
    node = doc
    parts = path.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot override below scalar {part!r} in {path!r}")
    node[parts[-1]] = value


def load_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    for spec in args.override or []:
        _apply_override(doc, spec)
    if args.seed is not None:
        for section in ("scm", "train", "eval"):
            doc.setdefault(section, {})["seed"] = args.seed
    config = ExperimentConfig.from_dict(doc)
    if args.out:
        config.out_dir = args.out
    return config


def _out_dir(config: ExperimentConfig, command: str) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config.{command}.json").write_text(
        json.dumps(config.to_dict(), indent=2))
    return out


def load_model(path):
    """A trained artifact: structured network or bare flow JSON."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") == NETWORK_FORMAT:
        return StructuredGenerativeNetwork.from_dict(doc)
    return ConditionalBijection.from_dict(doc)


def _model_path(args, out: Path) -> Path:
    return Path(args.model) if args.model else out / "network.json"


def _load_dataset(args, config: ExperimentConfig) -> Dataset:
    base = args.data if args.data else str(Path(config.out_dir) / "dataset")
    return Dataset.load(base)


# -- commands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    config = load_config(args)
    scm = get_scm(config.scm["name"])
    out = _out_dir(config, "generate")
    dataset = scm.sample(config.scm["n"], seed=config.scm["seed"],
                         **config.scm["options"])
    dataset.save(out / "dataset")
    print(f"wrote {out / 'dataset.csv'} ({dataset.n} rows)")
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    dataset = _load_dataset(args, config)
    out = _out_dir(config, "train")
    head, _ = config.split(dataset.frame)

    est = config.estimator()
    try:
        est.fit(head,
                checkpoint_path=str(out / "checkpoint.json"),
                checkpoint_every=config.train["checkpoint_every"],
                history_path=str(out / "history.csv"),
                resume=config.train["resume"])
    except TrainingDivergedError as exc:
        state = {"epoch": exc.epoch, "last_loss": exc.last_loss,
                 "history": exc.history,
                 "params": None if exc.state is None else
                 [p.tolist() for p in exc.state]}
        (out / "diverged_state.json").write_text(json.dumps(state))
        raise

    est.network_.save(out / "network.json")
    (out / "bgm.json").write_text(
        json.dumps(est.network_.extract_bgm().to_dict()))
    result = est.result_
    (out / "result.json").write_text(json.dumps({
        "epochs": result.epochs, "converged": result.converged,
        "final_nll": result.history[-1], "wall_time_s": result.wall_time,
        "n_train": len(head)}, indent=2))
    print(f"trained {config.structure['kind']} for {result.epochs} epochs, "
          f"final nll {result.history[-1]:.4f}")
    return 0


def cmd_counterfactual(args) -> int:
    config = load_config(args)
    out = _out_dir(config, "counterfactual")
    model = load_model(_model_path(args, out))
    bgm = model.extract_bgm() if hasattr(model, "extract_bgm") else model
    query = CounterfactualQuery.from_json(args.query)
    table = answer_query(bgm, query)
    table.to_csv(out / "answers.csv", index=False, float_format="%.17g")
    print(f"wrote {out / 'answers.csv'} ({len(table)} rows)")
    return 0


def cmd_eval_ellipse(args) -> int:
    config = load_config(args)
    dataset = _load_dataset(args, config)
    out = _out_dir(config, "eval-ellipse")
    model = load_model(_model_path(args, out))
    head, tail = config.split(dataset.frame)
    # baselines are ordinary conditional fits, trained like the model
    report = eval_ellipse(
        model, tail, sweep_k=config.eval["sweep_k"], reference=head,
        include_baselines=config.eval["baselines"],
        baseline_config=config.train_config(seed=config.eval["seed"]),
        seed=config.eval["seed"])
    report.save(out / "metrics.json")
    extras = "".join(f", {k} {m:.1f}%" for k, m in report.baselines.items())
    print(f"mape {report.mape:.3f}%{extras} ({report.n_rows} rows, "
          f"sweep {report.sweep_k})")
    return 0


def cmd_eval_abr(args) -> int:
    config = load_config(args)
    dataset = _load_dataset(args, config)
    out = _out_dir(config, "eval-abr")
    paths = args.model if args.model else [str(out / "network.json")]
    _, tail = config.split(dataset.frame)

    combined = MetricsReport(scheme="abr", n_rows=len(tail),
                             seed=config.eval["seed"],
                             baselines={"replay": 100.0})
    for path in paths:
        model = load_model(path)
        rep = eval_abr(model, tail, x_new=config.eval["x_new"],
                       seed=config.eval["seed"])
        combined.schemes[rep.scheme] = rep.normalized_mse
        combined.wall_time_s += rep.wall_time_s
    if len(paths) == 1:
        combined.scheme = next(iter(combined.schemes))
        combined.normalized_mse = combined.schemes[combined.scheme]
    combined.save(out / "metrics.json")
    for kind, value in combined.schemes.items():
        print(f"{kind}: normalized mse {value:.2f}% of replay")
    return 0


MARKOVIAN_MULTID_WARNING = (
    "markovian structure with a multi-dimensional outcome: counterfactuals "
    "are not identifiable from observational data alone, and independence "
    "diagnostics cannot detect the problem; validate against interventional "
    "ground truth or add an instrument/backdoor covariate")


def cmd_diagnose(args) -> int:
    config = load_config(args)
    dataset = _load_dataset(args, config)
    out = _out_dir(config, "diagnose")
    model = load_model(_model_path(args, out))

    net = model if hasattr(model, "kind") else None
    bgm = model.extract_bgm() if net is not None else model
    kind = net.kind if net is not None else "markovian"
    _, tail = config.split(dataset.frame)
    seed = config.eval["seed"]

    def cols(base, dim):
        if dim == 1 and base in tail.columns:
            return np.asarray(tail[base], dtype=np.float64).reshape(-1, 1)
        return np.column_stack([np.asarray(tail[f"{base}{j}"], dtype=np.float64)
                                for j in range(dim)])

    x = cols("x", bgm.cond_dim)
    v = cols("v", bgm.var_dim)
    u_hat = bgm.inverse(x, v)[0]

    checks: dict = {}
    warnings: list[str] = []
    x_probe = np.quantile(x, np.linspace(0.05, 0.95, 5), axis=0)
    checks["monotone_in_noise"] = monotonicity_check(bgm, x_probe, seed=seed)

    if kind == "markovian":
        checks["noise_indep_action"] = independence_test(u_hat, x, seed=seed)
        if bgm.var_dim > 1:
            warnings.append(MARKOVIAN_MULTID_WARNING)
    elif kind == "iv":
        i = np.asarray(tail["i"], dtype=np.float64)
        checks["noise_indep_instrument"] = independence_test(u_hat, i, seed=seed)
        checks["instrument_variability"] = variability_iv(
            i, x[:, 0], u_hat[:, 0], i_values=net.i_values, x_values=net.x_grid)
    else:  # bc / ivbc
        z = np.asarray(tail["z"], dtype=np.float64)
        checks["noise_indep_action_given_z"] = conditional_independence_test(
            u_hat, x, z, seed=seed)
        checks["backdoor_variability"] = variability_bc(u_hat, z, seed=seed)

    doc = {"structure": kind,
           "n_rows": len(tail),
           "checks": {name: rep.to_dict() for name, rep in checks.items()},
           "warnings": warnings,
           "pass": all(rep.passed for rep in checks.values())}
    (out / "diagnostics.json").write_text(json.dumps(doc, indent=2))
    for name, rep in checks.items():
        print(f"{name}: {'pass' if rep.passed else 'FAIL'}")
    for message in warnings:
        print(f"warning: {message}")
    return 0 if doc["pass"] else 4


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bgmflow",
        description="Learn bijective generation mechanisms and answer "
                    "counterfactual queries.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, model=False):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int,
                       help="override every seed in the config")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.lr=0.005")
        if data:
            p.add_argument("--data",
                           help="dataset basepath (default: <out>/dataset)")
        if model:
            p.add_argument("--model",
                           help="model JSON (default: <out>/network.json)")

    common(sub.add_parser("generate", help="sample a synthetic dataset"))
    common(sub.add_parser("train", help="fit a structured model"), data=True)
    p = sub.add_parser("counterfactual", help="answer a query file")
    common(p, model=True)
    p.add_argument("--query", required=True, help="counterfactual query JSON")
    common(sub.add_parser("eval-ellipse", help="counterfactual sweep accuracy"),
           data=True, model=True)
    p = sub.add_parser("eval-abr", help="bias-removal accuracy vs replay")
    common(p, data=True)
    p.add_argument("--model", action="append",
                   help="model JSON; repeat for a per-scheme breakdown")
    common(sub.add_parser("diagnose", help="identifiability check battery"),
           data=True, model=True)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "counterfactual": cmd_counterfactual,
    "eval-ellipse": cmd_eval_ellipse,
    "eval-abr": cmd_eval_abr,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
