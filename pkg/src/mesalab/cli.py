"""Command-line orchestration: generate / train / flow / verify / sweep.

Every artifact (JSON-lines datasets, trajectory and flow CSVs, parameter and
report JSON) is a pure function of the experiment spec and seed, so reruns are
byte-identical.  Presets live in a bundled data manifest (presets.json); a
custom experiment can be given as a JSON config file mirroring ExperimentSpec.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from mesalab import theory, training, verify
from mesalab.ar_data import (
    FixedOnes,
    Gaussian,
    InitialDistribution,
    SparseUniform,
    closed_form_moments,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from mesalab.attention import AttentionParams, mean_elementwise_ratio, predict_next_batch
from mesalab.training import Diagonal, GaussianInit, InitSpec, TrainConfig

SCHEMA_VERSION = 1


@dataclass
class ExperimentSpec:
    name: str
    distribution: InitialDistribution
    T_tr: int
    T_te: int
    n_train: int
    n_test: int
    init: InitSpec
    step_size: float
    epochs: int
    mask_nondiagonal: bool = False
    seed: int = 1
    log_every: int = 10
    stop_tol: float | None = None
    sweep_inits: list[tuple[float, float]] = field(default_factory=list)
    out_dir: str | None = None

    @property
    def d(self) -> int:
        return self.distribution.d

    def train_config(self, init: InitSpec | None = None) -> TrainConfig:
        return TrainConfig(
            n=self.n_train,
            T_tr=self.T_tr,
            d=self.d,
            init=self.init if init is None else init,
            step_size=self.step_size,
            epochs=self.epochs,
            mask_nondiagonal=self.mask_nondiagonal,
            seed=self.seed,
            log_every=self.log_every,
            stop_tol=self.stop_tol,
        )

    def to_json_dict(self) -> dict:
        dist = self.distribution
        if isinstance(dist, Gaussian):
            dist_rec = {"kind": "gaussian", "sigma": dist.sigma, "d": dist.d}
        elif isinstance(dist, SparseUniform):
            dist_rec = {"kind": "sparse", "c": dist.c, "d": dist.d}
        else:
            dist_rec = {"kind": "ones", "d": dist.d}
        if isinstance(self.init, Diagonal):
            init_rec = {"kind": "diagonal", "a0": self.init.a0, "b0": self.init.b0}
        else:
            init_rec = {"kind": "gaussian", "sigma_w": self.init.sigma_w}
        return {
            "name": self.name,
            "distribution": dist_rec,
            "T_tr": self.T_tr,
            "T_te": self.T_te,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "init": init_rec,
            "step_size": self.step_size,
            "epochs": self.epochs,
            "mask_nondiagonal": self.mask_nondiagonal,
            "seed": self.seed,
            "log_every": self.log_every,
            "stop_tol": self.stop_tol,
            "sweep_inits": [list(p) for p in self.sweep_inits],
        }


def _parse_distribution(rec: dict) -> InitialDistribution:
    kind = rec["kind"]
    if kind == "gaussian":
        return Gaussian(float(rec["sigma"]), int(rec["d"]))
    if kind == "sparse":
        return SparseUniform(float(rec["c"]), int(rec["d"]))
    if kind == "ones":
        return FixedOnes(int(rec["d"]))
    raise ValueError(f"unknown distribution kind {kind!r}")


def _parse_init(rec: dict) -> InitSpec:
    kind = rec["kind"]
    if kind == "diagonal":
        return Diagonal(float(rec["a0"]), float(rec["b0"]))
    if kind == "gaussian":
        return GaussianInit(float(rec["sigma_w"]))
    raise ValueError(f"unknown init kind {kind!r}")


def spec_from_dict(name: str, rec: dict, default_sweep) -> ExperimentSpec:
    sweep = rec.get("sweep_inits", default_sweep)
    return ExperimentSpec(
        name=name,
        distribution=_parse_distribution(rec["distribution"]),
        T_tr=int(rec["T_tr"]),
        T_te=int(rec.get("T_te", rec["T_tr"])),
        n_train=int(rec["n_train"]),
        n_test=int(rec.get("n_test", rec["n_train"])),
        init=_parse_init(rec["init"]),
        step_size=float(rec["step_size"]),
        epochs=int(rec["epochs"]),
        mask_nondiagonal=bool(rec.get("mask_nondiagonal", False)),
        seed=int(rec.get("seed", 1)),
        log_every=int(rec.get("log_every", 10)),
        stop_tol=(None if rec.get("stop_tol") is None else float(rec["stop_tol"])),
        sweep_inits=[tuple(map(float, p)) for p in sweep],
        out_dir=rec.get("out_dir"),
    )


def _load_manifest() -> dict:
    return json.loads(resources.files("mesalab").joinpath("presets.json").read_text())


def preset_names() -> list[str]:
    return sorted(_load_manifest()["presets"].keys())


def load_preset(name: str) -> ExperimentSpec:
    manifest = _load_manifest()
    try:
        rec = manifest["presets"][name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return spec_from_dict(name, rec, manifest["sweep_inits_default"])


def load_spec_file(path: str | Path) -> ExperimentSpec:
    rec = json.loads(Path(path).read_text())
    return spec_from_dict(rec.get("name", Path(path).stem), rec, rec.get("sweep_inits", []))


def _resolve_spec(args) -> ExperimentSpec:
    if args.preset and args.config:
        raise SystemExit("pass either --preset or --config, not both")
    if args.preset:
        spec = load_preset(args.preset)
    elif args.config:
        spec = load_spec_file(args.config)
    else:
        raise SystemExit("one of --preset or --config is required")
    if args.seed is not None:
        spec.seed = args.seed
    return spec


def _write_json(path: Path, payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(spec: ExperimentSpec, out: Path, threads: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    train_set = generate_dataset(spec.distribution, spec.n_train, spec.T_tr, spec.seed, threads=threads)
    test_set = generate_dataset(
        spec.distribution, spec.n_test, spec.T_te, spec.seed, threads=threads, stream_offset=spec.n_train
    )
    save_dataset(out / "train.jsonl", train_set, seeds=list(range(spec.n_train)))
    save_dataset(out / "test.jsonl", test_set, seeds=list(range(spec.n_train, spec.n_train + spec.n_test)))
    _write_json(
        out / "manifest.json",
        {
            "spec": spec.to_json_dict(),
            "train_file": "train.jsonl",
            "test_file": "test.jsonl",
            "train_streams": [0, spec.n_train],
            "test_streams": [spec.n_train, spec.n_train + spec.n_test],
        },
    )
    print(f"wrote {spec.n_train} train + {spec.n_test} test sequences to {out}")
    return 0


def _theory_ab(spec: ExperimentSpec) -> float:
    if isinstance(spec.distribution, FixedOnes):
        return theory.fixed_point_ab_ones(spec.d, spec.T_tr)
    return theory.fixed_point_ab(closed_form_moments(spec.distribution), spec.T_tr)


def _full_matrices(params: AttentionParams) -> tuple[np.ndarray, np.ndarray]:
    """Assemble the 3d x 3d key-query and projection-value matrices
    (non-trainable blocks are identically zero)."""
    d = params.d
    wkq_full = np.zeros((3 * d, 3 * d))
    wkq_full[d:, d:] = params.wkq
    wpv_full = np.zeros((3 * d, 3 * d))
    wpv_full[:d, d:] = params.wpv
    return wkq_full, wpv_full


EVAL_HEADER = "epoch,ratio,mse"


def _write_eval_csv(path: Path, trajectory, test_set, T_te: int) -> None:
    """Per-snapshot test metrics at the last predictable position:
    mean elementwise ratio yhat/(true next token) and mean squared error."""
    if T_te < 3:
        return
    X = training.stack_dataset(test_set)
    t = T_te - 1
    target = X[:, t]  # x_{T_te}, 0-based row T_te - 1
    lines = [EVAL_HEADER]
    for snap in trajectory.snapshots:
        yhat = predict_next_batch(snap.params, X, t)
        ratios = [mean_elementwise_ratio(yhat[i], target[i]) for i in range(X.shape[0])]
        mse = float(np.mean(np.sum(np.abs(yhat - target) ** 2, axis=1)))
        lines.append(f"{snap.epoch},{float(np.mean(ratios))!r},{mse!r}")
    path.write_text("\n".join(lines) + "\n")


def cmd_train(
    spec: ExperimentSpec,
    out: Path,
    data_dir: Path | None = None,
    init_override: InitSpec | None = None,
    save_params_every: bool = False,
) -> int:
    data_dir = data_dir or out
    train_path = data_dir / "train.jsonl"
    test_path = data_dir / "test.jsonl"
    if not train_path.exists() or not test_path.exists():
        print(f"error: datasets not found in {data_dir}; run `mesalab generate` first", file=sys.stderr)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    train_set = load_dataset(train_path)
    test_set = load_dataset(test_path)
    config = spec.train_config(init_override)
    try:
        trajectory = training.train(config, train_set, test_set)
    except training.TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    training.save_trajectory_csv(out / "trajectory.csv", trajectory)
    _write_eval_csv(out / "eval.csv", trajectory, test_set, spec.T_te)
    final = trajectory.final
    _write_json(out / "final_params.json", final.params.to_json_dict())
    wkq_full, wpv_full = _full_matrices(final.params)
    _write_json(
        out / "heatmap.json",
        {
            "d": spec.d,
            "wkq_full": wkq_full.tolist(),
            "wpv_full": wpv_full.tolist(),
        },
    )
    if save_params_every:
        for snap in trajectory.snapshots:
            _write_json(out / f"params_epoch_{snap.epoch:05d}.json", snap.params.to_json_dict())
    target = _theory_ab(spec)
    print(
        f"{spec.name}: final ab = {final.ab:.6f} (theory {target:.6f}, "
        f"rel dev {abs(final.ab - target) / abs(target):.2%}), "
        f"train loss {final.train_loss:.4e}, test loss {final.test_loss:.4e}"
    )
    return 0


def cmd_flow(spec: ExperimentSpec, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(spec.distribution, FixedOnes):
        coeffs = theory.ones_flow_coefficients(spec.d, spec.T_tr)
    else:
        coeffs = theory.flow_coefficients(closed_form_moments(spec.distribution), spec.T_tr)
    inits = spec.sweep_inits or (
        [(spec.init.a0, spec.init.b0)] if isinstance(spec.init, Diagonal) else [(0.1, 0.1)]
    )
    rows = []
    any_nonconverged = False
    for a0, b0 in inits:
        result = theory.integrate_flow(a0, b0, coeffs)
        tag = f"a{a0:g}_b{b0:g}"
        theory.save_flow_csv(out / f"flow_{tag}.csv", result)
        rows.append(
            {
                "a0": a0,
                "b0": b0,
                "final_a": float(result.a[-1]),
                "final_b": float(result.b[-1]),
                "final_ab": float(result.ab[-1]),
                "converged": result.converged,
                "steps": result.steps,
            }
        )
        any_nonconverged |= not result.converged
        status = "converged" if result.converged else "did NOT converge (stationary or max_steps)"
        print(f"flow from ({a0}, {b0}): ab -> {result.ab[-1]:.8f} in {result.steps} steps, {status}")
    _write_json(
        out / "flow_summary.json",
        {"theory_ab": coeffs.c2 / coeffs.c1, "runs": rows},
    )
    return 1 if any_nonconverged else 0


def cmd_verify(out: Path, inject_gradient_bug: bool = False) -> int:
    out.mkdir(parents=True, exist_ok=True)
    report = verify.run_verification(inject_gradient_bug=inject_gradient_bug)
    _write_json(out / "verify_report.json", {k: report[k] for k in ("passed", "checks")})
    for check in report["checks"]:
        mark = "PASS" if check["passed"] else "FAIL"
        print(f"[{mark}] {check['name']}: measured {check['measured']:.3e} vs threshold {check['threshold']:.3e}"
              + (f" ({check['details']})" if check["details"] else ""))
    print("verification " + ("passed" if report["passed"] else "FAILED"))
    return 0 if report["passed"] else 1


def cmd_sweep(spec: ExperimentSpec, out: Path, threads: int = 1) -> int:
    """Train every initialization in the preset's sweep list on one shared dataset."""
    if not spec.sweep_inits:
        print("error: spec has no sweep_inits", file=sys.stderr)
        return 2
    data_dir = out / "data"
    if not (data_dir / "train.jsonl").exists():
        rc = cmd_generate(spec, data_dir, threads=threads)
        if rc != 0:
            return rc
    target = _theory_ab(spec)
    lines = ["init_a,init_b,final_a,final_b,final_ab,theory_ab,rel_dev"]
    for a0, b0 in spec.sweep_inits:
        run_dir = out / f"init_a{a0:g}_b{b0:g}"
        rc = cmd_train(spec, run_dir, data_dir=data_dir, init_override=Diagonal(a0, b0))
        if rc != 0:
            return rc
        rec = json.loads((run_dir / "final_params.json").read_text())
        params = AttentionParams.from_json_dict(rec)
        a, b = params.diag_ab()
        lines.append(f"{a0!r},{b0!r},{a!r},{b!r},{a * b!r},{target!r},{abs(a * b - target) / abs(target)!r}")
    (out / "sweep_summary.csv").write_text("\n".join(lines) + "\n")
    print(f"sweep summary written to {out / 'sweep_summary.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, need_out=True):
    p.add_argument("--preset", help="named preset from the bundled manifest")
    p.add_argument("--config", help="JSON experiment spec file")
    p.add_argument("--out", required=need_out, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for data generation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mesalab",
        description="Linear-attention AR-process laboratory: data, training, closed-form theory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/test datasets as JSON lines")
    _add_common(p)

    p = sub.add_parser("train", help="full-batch gradient descent on a generated dataset")
    _add_common(p)
    p.add_argument("--data", help="directory holding train.jsonl/test.jsonl (default: --out)")
    p.add_argument("--init", help="override init, e.g. diagonal:0.5,1.5 or gaussian:0.01")
    p.add_argument("--save-params", action="store_true", help="write per-snapshot parameter JSON")

    p = sub.add_parser("flow", help="integrate the closed-form gradient flow")
    _add_common(p)

    p = sub.add_parser("verify", help="run the cross-module verification bundle")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--inject-grad-bug", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("sweep", help="train all sweep initializations of a preset")
    _add_common(p)

    p = sub.add_parser("presets", help="list available presets")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        for name in preset_names():
            print(name)
        return 0
    if args.command == "verify":
        return cmd_verify(Path(args.out), inject_gradient_bug=args.inject_grad_bug)
    spec = _resolve_spec(args)
    out = Path(args.out)
    if args.command == "generate":
        return cmd_generate(spec, out, threads=args.threads)
    if args.command == "train":
        init_override = training.parse_init_spec(args.init) if args.init else None
        data_dir = Path(args.data) if args.data else None
        return cmd_train(spec, out, data_dir=data_dir, init_override=init_override,
                         save_params_every=args.save_params)
    if args.command == "flow":
        return cmd_flow(spec, out)
    if args.command == "sweep":
        return cmd_sweep(spec, out, threads=args.threads)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
