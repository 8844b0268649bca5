"""Command-line workflows: pretrain, finetune, eval, forecast, attn-dump,
gradcheck.

Exit codes: 0 success, 2 usage/config problems, 3 numeric failure. Every run
writes its resolved config next to its outputs, and identical config + seed
reproduces every output file byte for byte (timing goes to stderr only).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from . import training as TR
from .errors import CheckpointError, ConfigError, IngestionError, NumericError, UsageError
from .model import LinearBaseline, ModelConfig, UShapedTransformer
from .tensor import Tensor, finite_diff_check

_RUN_KEYS = {"model", "sampler", "trainer", "registry", "seed"}


@dataclass
class RunConfig:
    model: ModelConfig
    sampler: D.SamplerConfig
    trainer: TR.TrainerConfig
    registry: str | None
    seed: int
    config_dir: Path

    @classmethod
    def load(cls, path, seed_override=None) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a JSON object")
        unknown = set(raw) - _RUN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)} (allowed: {sorted(_RUN_KEYS)})")
        if "model" not in raw:
            raise ConfigError("config must define 'model'")
        seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
        sampler_raw = dict(raw.get("sampler", {}))
        sampler_raw.setdefault("seed", seed)
        return cls(
            model=ModelConfig.from_dict(raw["model"]),
            sampler=D.SamplerConfig.from_dict(sampler_raw),
            trainer=TR.TrainerConfig.from_dict(raw.get("trainer", {})),
            registry=raw.get("registry"),
            seed=seed,
            config_dir=path.parent,
        )

    def resolved(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "sampler": self.sampler.to_dict(),
            "trainer": self.trainer.to_dict(),
            "registry": self.registry,
            "seed": self.seed,
        }

    def load_frames(self) -> dict:
        if self.registry is None:
            raise ConfigError("this command needs a 'registry' entry in the config")
        return D.load_registry(self.config_dir / self.registry)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_bytes(text.encode("utf-8"))


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    _write(out / "resolved_config.json", json.dumps(cfg.resolved(), sort_keys=True, indent=2) + "\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = _out_dir(args)
    frames = cfg.load_frames()
    model = UShapedTransformer(cfg.model, seed=cfg.seed)
    optimizer = TR.Adam.from_config(model.params, cfg.trainer)
    rng = np.random.default_rng(cfg.seed)
    report = TR.TrainReport()
    for epoch in range(cfg.trainer.epochs):
        TR.pretrain_epoch(model, frames, cfg.sampler, optimizer,
                          cfg.trainer.steps_per_epoch, rng, epoch, report)
        _log(f"pretrain epoch {epoch}: mean loss {report.epoch_means[-1]:.6f} "
             f"({report.wall_clock[-1]:.1f}s)")
    TR.save_checkpoint(model, out / "checkpoint.bin", seed=cfg.seed)
    _write(out / "loss.csv", report.loss_csv_text())
    _write(out / "report.json", report.json_text())
    _write_resolved(cfg, out)
    return 0


def cmd_finetune(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = _out_dir(args)
    frames = cfg.load_frames()
    model = UShapedTransformer(cfg.model, seed=cfg.seed)
    TR.apply_checkpoint(model, args.checkpoint)
    pre_hash = TR.backbone_hash(model)
    model.freeze_backbone()
    optimizer = TR.Adam.from_config(model.params, cfg.trainer)
    rng = np.random.default_rng(cfg.seed)
    report = TR.TrainReport()
    for epoch in range(cfg.trainer.epochs):
        TR.finetune_epoch(model, frames, cfg.sampler, optimizer,
                          cfg.trainer.steps_per_epoch, rng, epoch, report)
        _log(f"finetune epoch {epoch}: mean loss {report.epoch_means[-1]:.6f} "
             f"({report.wall_clock[-1]:.1f}s)")
    if TR.backbone_hash(model) != pre_hash:
        raise RuntimeError("backbone changed during finetune; freeze contract broken")
    _log("backbone hash unchanged by finetune")
    TR.save_checkpoint(model, out / "finetuned.bin", seed=cfg.seed)
    _write(out / "loss.csv", report.loss_csv_text())
    _write(out / "report.json", report.json_text())
    _write_resolved(cfg, out)
    return 0


def _parse_horizons(raw: str | None, horizon_len: int) -> list:
    if not raw:
        return [horizon_len]
    try:
        horizons = [int(h) for h in raw.split(",") if h.strip()]
    except ValueError:
        raise ConfigError(f"bad --horizons value '{raw}': expected comma-separated integers") from None
    if not horizons:
        raise ConfigError("--horizons lists no values")
    for h in horizons:
        if h < 1 or h > horizon_len:
            raise ConfigError(f"horizon {h} outside 1..{horizon_len}")
    return horizons


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = _out_dir(args)
    frames = cfg.load_frames()
    horizons = _parse_horizons(args.horizons, cfg.model.horizon_len)
    rows = []  # (model, dataset, horizon, metrics)
    results: dict = {}

    def run(tag, predictor):
        results[tag] = {}
        for ds_id in sorted(frames):
            per_h = TR.evaluate(predictor, frames[ds_id], cfg.model.lookback_len,
                                cfg.model.horizon_len, horizons)
            results[tag][ds_id] = {str(h): per_h[h] for h in horizons}
            for h in horizons:
                rows.append((tag, ds_id, h, per_h[h]))

    if args.stub:
        predictor = TR.OraclePredictor() if args.stub == "oracle" \
            else TR.LastValuePredictor(cfg.model.horizon_len)
        run(f"stub-{args.stub}", predictor)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --stub)")
        model = UShapedTransformer(cfg.model, seed=cfg.seed)
        TR.apply_checkpoint(model, args.checkpoint)
        run("ushape", TR.ModelPredictor(model))
    if args.baseline:
        baseline = LinearBaseline(cfg.model.lookback_len, cfg.model.horizon_len, seed=cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        TR.train_linear_baseline(baseline, frames, cfg.sampler, cfg.trainer, rng)
        run("linear", TR.BaselinePredictor(baseline))

    lines = ["model,dataset,horizon,mse,mae,mape"]
    for tag, ds_id, h, m in rows:
        lines.append(f"{tag},{ds_id},{h},{m['mse']:.8e},{m['mae']:.8e},{m['mape']:.8e}")
    _write(out / "metrics.csv", "\n".join(lines) + "\n")
    _write(out / "metrics.json", json.dumps(results, sort_keys=True, indent=2) + "\n")
    _write_resolved(cfg, out)
    for line in lines[1:]:
        _log(line)
    return 0


def _load_input_window(args) -> tuple[np.ndarray, float, float]:
    frame = D.load_csv_dataset(args.input, "input")
    if not 0 <= args.channel < frame.n_channels:
        raise ConfigError(f"--channel {args.channel} outside 0..{frame.n_channels - 1}")
    window = frame.values[args.channel].reshape(1, -1)
    return D.normalize_sample(window)


def cmd_forecast(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = _out_dir(args)
    norm, mu, sigma = _load_input_window(args)
    model = UShapedTransformer(cfg.model, seed=cfg.seed)
    TR.apply_checkpoint(model, args.checkpoint)
    pred, _ = model.forecast(Tensor(D.build_model_input(norm, cfg.model)))
    values = pred.data[0]
    if args.denormalize:
        values = D.denormalize(values, mu, sigma)
    lines = ["t,value"] + [f"{t},{v:.8e}" for t, v in enumerate(values)]
    _write(out / "forecast.csv", "\n".join(lines) + "\n")
    _write_resolved(cfg, out)
    return 0


def cmd_attn_dump(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = _out_dir(args)
    norm, _, _ = _load_input_window(args)
    input_len = norm.shape[1]
    model = UShapedTransformer(cfg.model, seed=cfg.seed)
    TR.apply_checkpoint(model, args.checkpoint)
    _, maps = model.forecast(Tensor(D.build_model_input(norm, cfg.model)))
    for m in maps:
        lines = [",".join(f"{w:.6g}" for w in row) for row in m.weights]
        _write(out / f"attn_{m.side}_L{m.level}.csv", "\n".join(lines) + "\n")
    # known-vs-padded mass on the first encoder map: queries restricted to the
    # known region, mass normalized per key (report only, A.4-style observation)
    n = cfg.model.n_patches
    n_known = max(1, min(n - 1, n * input_len // (input_len + cfg.model.horizon_len)))
    first = next(m for m in maps if m.side == "enc" and m.level == 1)
    known_mass = float(first.weights[:n_known, :n_known].mean())
    padded_mass = float(first.weights[:n_known, n_known:].mean())
    report = {
        "n_tokens": n,
        "n_known_tokens": n_known,
        "mean_attention_per_known_key": round(known_mass, 10),
        "mean_attention_per_padded_key": round(padded_mass, 10),
        "known_exceeds_padded": known_mass > padded_mass,
    }
    _write(out / "attn_report.json", json.dumps(report, sort_keys=True, indent=2) + "\n")
    _write_resolved(cfg, out)
    _log(f"known-region mass {known_mass:.4g} vs padded {padded_mass:.4g}")
    return 0


# ---------------------------------------------------------------------------
# gradient verification suite


def _op_cases(rng):
    """Scalar-loss closures over fresh float64 tensors, one per op."""
    f64 = np.float64

    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=f64)

    def sq(x):
        return T.mean_all(T.mul(x, x))

    w_conv = t(3, 2, 2)
    cases = {
        "matmul": (lambda i: sq(T.matmul(i["a"], i["b"])), {"a": t(3, 4), "b": t(4, 2)}),
        "conv1d_k2s2": (lambda i: sq(T.conv1d_k2s2(i["x"], i["w"], i["b"])),
                        {"x": t(2, 6), "w": w_conv, "b": t(3)}),
        "conv_transpose1d_k2s2": (lambda i: sq(T.conv_transpose1d_k2s2(i["x"], i["w"], i["b"])),
                                  {"x": t(3, 3), "w": w_conv, "b": t(2)}),
        "pointwise_conv": (lambda i: sq(T.pointwise_conv(i["x"], i["w"], i["b"])),
                           {"x": t(2, 5), "w": t(3, 2), "b": t(3)}),
        "adaptive_avg_pool1d": (lambda i: sq(T.adaptive_avg_pool1d(i["x"], 3)), {"x": t(2, 7)}),
        "softmax_lastdim": (lambda i: sq(T.softmax_lastdim(i["x"])), {"x": t(3, 5)}),
        "layer_norm": (lambda i: sq(T.layer_norm(i["x"], i["g"], i["b"])),
                       {"x": t(4, 6), "g": t(6), "b": t(6)}),
        "gelu": (lambda i: sq(T.gelu(i["x"])), {"x": t(3, 4)}),
        "add_broadcast": (lambda i: sq(T.add(i["a"], i["b"])), {"a": t(3, 4), "b": t(4)}),
        "mul": (lambda i: sq(T.mul(i["a"], i["b"])), {"a": t(3, 4), "b": t(3, 4)}),
        "narrow_concat": (lambda i: sq(T.concat([T.narrow(i["x"], 1, 0, 2), T.narrow(i["x"], 1, 2, 3)], 1)),
                          {"x": t(2, 5)}),
        "reshape_transpose": (lambda i: sq(T.transpose(T.reshape(i["x"], (2, 6)), (1, 0))), {"x": t(3, 4)}),
    }
    return cases


def run_gradient_suite(n_seeds: int = 3, tolerance: float = 1e-6,
                       include_backbone: bool = True, log=print) -> bool:
    """Finite-difference every op (float64) and a subsampled tiny backbone."""
    ok = True
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        for name, (fn, inputs) in _op_cases(rng).items():
            rep = finite_diff_check(fn, inputs, tolerance=tolerance)
            ok = ok and rep.passed
            log(f"seed {seed} {name}: worst rel err {rep.worst:.3e} "
                f"{'ok' if rep.passed else 'FAIL'}")
        if include_backbone:
            from .model import preset  # local import keeps CLI startup lean

            model = UShapedTransformer(preset("tiny"), seed=seed, dtype=np.float64)
            x = Tensor(rng.standard_normal((1, model.config.model_len)), dtype=np.float64)

            def loss_fn(_inputs):
                pred, _ = model.reconstruct(x)
                return T.mean_all(T.mul(pred, pred))

            rep = finite_diff_check(loss_fn, dict(model.params.items()),
                                    tolerance=tolerance, max_entries=4, seed=seed)
            ok = ok and rep.passed
            log(f"seed {seed} tiny backbone: worst rel err {rep.worst:.3e} "
                f"{'ok' if rep.passed else 'FAIL'}")
    return ok


def cmd_gradcheck(args) -> int:
    ok = run_gradient_suite(n_seeds=args.seeds, tolerance=args.tolerance,
                            include_backbone=not args.ops_only)
    print("gradient suite: " + ("PASS" if ok else "FAIL"))
    return 0 if ok else 3


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="utsf",
                                     description="U-shaped transformer forecasting workflows")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="frozen-backbone forecast finetuning")
    common(p)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="metrics over the test split")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--horizons", help="comma-separated horizons, e.g. 96,192,336,720")
    p.add_argument("--baseline", action="store_true", help="also train and score the linear baseline")
    p.add_argument("--stub", choices=("oracle", "last-value"), help="replace the model with a stub predictor")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="forecast from an input CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="input series CSV")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--denormalize", action="store_true", help="restore original scale")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("attn-dump", help="export attention maps per level and side")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="input series CSV")
    p.add_argument("--channel", type=int, default=0)
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--ops-only", action="store_true", help="skip the backbone check")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors; keep it callable
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, UsageError, IngestionError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
