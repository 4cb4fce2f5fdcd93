"""
Command-line entry point.

    python cli.py make-data --process gaussian-ar --count 1000 --length 32 --out data/train.cvtk
    python cli.py train --config run.json --data data/train.cvtk --out runs/mntp
    python cli.py sample --ckpt runs/mntp/model --n 32 --count 100 --out runs/mntp/samples.cvtk
    python cli.py eval --ckpt runs/mntp/model --data data/test.cvtk --gen runs/mntp/samples.cvtk

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
import sys
import json
import logging
import argparse
import dataclasses
from pathlib import Path

import numpy as np

import config
import reporting
from codec import (AUDIO_GEOMETRY, PROCESS_KINDS, Geometry, LatentMap, SyntheticProcess, gen_synthetic,
                   load_process, pad_frames, patchify_flatten, read_dataset, save_dataset, save_process,
                   unflatten_unpatchify)
from decode import ORDERS, DecodingPolicy, decode
from diffusion import HeadConfig
from errors import ConfigError, MNTPError
from evaluation import EvalReport, heldout_diffusion_loss, latent_fd, measure_rtf, oracle_stats
from experiments import compare_tasks, decoding_modes
from masking import PRESETS, get_schedule, sample_ratios
from model import FAKE, ModelConfig
from numerics import Rng
from trainer import ABLATION_ROWS, TrainConfig, build_state, fit, load_checkpoint, make_ablation_config

logger = logging.getLogger(__name__)


# =============================================================================
# RUN CONFIG
# =============================================================================
@dataclasses.dataclass
class PathsConfig:
    data: str = str(Path(config.MNTP_DATA_DIR) / "train.cvtk")
    eval_data: str = ""
    out: str = config.MNTP_OUT_DIR


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    head: HeadConfig = dataclasses.field(default_factory=HeadConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    decode: DecodingPolicy = dataclasses.field(default_factory=DecodingPolicy)
    paths: PathsConfig = dataclasses.field(default_factory=PathsConfig)
    seed: int = 0

    SECTIONS = {"model": ModelConfig, "head": HeadConfig, "train": TrainConfig,
                "decode": DecodingPolicy, "paths": PathsConfig}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        known = list(cls.SECTIONS) + ["seed"]
        for key in data:
            if key not in known:
                logger.warning("Rejecting unknown config key %s", key)
                raise ConfigError(config.unknown_key_message(key, "<root>", known))
        sections = {name: config.section_from_dict(kind, data.get(name), name) for name, kind in cls.SECTIONS.items()}
        train = sections["train"]
        if "seed" in data:
            seed = config._coerce(data["seed"], 0, "seed", "<root>")
            if "seed" in (data.get("train") or {}) and train.seed != seed:
                raise ConfigError(f"train.seed {train.seed} disagrees with seed {seed}")
            train = dataclasses.replace(train, seed=seed)
        model = sections["model"]
        for key in ("attention", "target_pos_emb"):
            if key in (data.get("model") or {}) and getattr(model, key) != getattr(train, key):
                raise ConfigError(f"model.{key} disagrees with train.{key}; set it in the train section")
        model = dataclasses.replace(model, attention=train.attention, target_pos_emb=train.target_pos_emb)
        run = cls(model=model, head=sections["head"], train=train, decode=sections["decode"],
                  paths=sections["paths"], seed=train.seed)
        return run.validate()

    def validate(self):
        try:
            self.model.validate()
            self.head.validate()
            self.train.validate()
            self.decode.validate()
        except MNTPError as e:
            raise ConfigError(str(e)) from e
        if self.head.token_dim != self.model.token_dim:
            raise ConfigError(f"head.token_dim {self.head.token_dim} != model.token_dim {self.model.token_dim}")
        return self

    def to_dict(self) -> dict:
        data = {name: config.section_to_dict(getattr(self, name)) for name in self.SECTIONS}
        data["seed"] = self.seed
        return data


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return RunConfig.from_dict(data)


def sidecar_path(out) -> Path:
    out = Path(out)
    return out.with_name(f"{out.stem}.process.json")


def _check_data(run: RunConfig, dataset):
    if not dataset:
        raise ConfigError("dataset is empty")
    seq = dataset[0]
    if seq.h != run.model.token_dim:
        raise ConfigError(f"data token dim {seq.h} != model.token_dim {run.model.token_dim}")
    if seq.condition.size and seq.condition.shape[1] != run.model.cond_dim:
        raise ConfigError(f"data condition dim {seq.condition.shape[1]} != model.cond_dim {run.model.cond_dim}")
    if seq.n > run.model.max_len:
        raise ConfigError(f"sequence length {seq.n} exceeds model.max_len {run.model.max_len}")


# =============================================================================
# COMMANDS
# =============================================================================
def cmd_make_data(args) -> int:
    geometry = Geometry.parse(args.geometry) if args.geometry else None
    proc = SyntheticProcess.random(args.process, args.dim, args.classes, Rng(args.seed, "process"),
                                   radius=args.radius, noise_std=args.noise_std, cond_len=args.cond_len,
                                   cond_dim=args.cond_dim, geometry=geometry)
    rng = Rng(args.seed, "records")
    seqs = [gen_synthetic(proc, args.length, i % args.classes, rng) for i in range(args.count)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(seqs, out)
    save_process(proc, sidecar_path(out))
    logger.info("Generated %d %s sequences of length %d", args.count, args.process, args.length)
    return 0


def _train(run: RunConfig, data_path, out_dir, eval_path=None, name: str = "model") -> int:
    config.apply_threads()
    dataset = read_dataset(data_path)
    _check_data(run, dataset)
    eval_set = read_dataset(eval_path) if eval_path else None
    state = build_state(run.model, run.head, run.train, echo=run.to_dict())
    records = fit(state, dataset, out_dir, eval_set=eval_set, name=name)
    loss_df = reporting.loss_frame(records)
    logger.info(reporting.generate_auto_insights(loss_df))
    if not loss_df.empty:
        reporting.save_figure(reporting.loss_figure(loss_df), Path(out_dir) / "loss.html")
    if eval_set and state.model.task != "mar":
        held = heldout_diffusion_loss(state.model, eval_set, state.schedule, seed=run.seed)
        logger.info("Final held-out diffusion loss %.6f", held)
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    return _train(run, args.data or run.paths.data, args.out or run.paths.out,
                  args.eval_data or run.paths.eval_data or None, args.name)


def cmd_ablate(args) -> int:
    run = load_run_config(args.config)
    train = make_ablation_config(args.row, base=run.train)
    run = dataclasses.replace(
        run, train=train,
        model=dataclasses.replace(run.model, attention=train.attention, target_pos_emb=train.target_pos_emb),
    ).validate()
    logger.info("Ablation row %s: task=%s strategy=%s schedule=%s predict=%s target_pos_emb=%s",
                args.row, train.task, train.strategy, train.schedule, train.predict, train.target_pos_emb)
    out = args.out or str(Path(run.paths.out) / f"ablate-{args.row}")
    return _train(run, args.data or run.paths.data, out, args.eval_data or run.paths.eval_data or None, args.name)


def _policy_from_args(base: DecodingPolicy, args) -> DecodingPolicy:
    changes = {"n": args.n}
    for field, value in (("order", args.order), ("steps", args.steps), ("cfg_scale", args.cfg_scale),
                         ("temperature", args.temperature), ("diffusion_steps", args.diffusion_steps)):
        if value is not None:
            changes[field] = value
    if args.no_cfg:
        changes["cfg"] = False
    if args.no_cache:
        changes["use_cache"] = False
    policy = dataclasses.replace(base, **changes)
    if policy.order == "causal" or (args.steps is None and policy.steps is not None and policy.steps > policy.n):
        policy = dataclasses.replace(policy, steps=None)
    return policy.validate()


def cmd_sample(args) -> int:
    config.apply_threads()
    state = load_checkpoint(args.ckpt)
    base = DecodingPolicy(**state.echo["decode"]) if state.echo and state.echo.get("decode") else DecodingPolicy()
    if state.model.task == "mar" and args.order is None:
        base = dataclasses.replace(base, order="random")
    policy = _policy_from_args(base, args)
    if args.conditions:
        source = read_dataset(args.conditions)
        conditions = [source[i % len(source)].condition for i in range(args.count)]
    else:
        conditions = [FAKE] * args.count
    seqs = decode(state.model, conditions, policy, Rng(args.seed, "sample"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(seqs, out)
    return 0


def cmd_eval(args) -> int:
    config.apply_threads()
    reference = read_dataset(args.data)
    report = EvalReport(seeds=[args.seed])
    state = load_checkpoint(args.ckpt) if args.ckpt else None
    if state is not None:
        report.config = state.echo
        if state.model.task != "mar":
            report.heldout_diff_loss = heldout_diffusion_loss(state.model, reference, state.schedule,
                                                              seed=args.seed, reps=args.reps)
    if args.gen:
        generated = read_dataset(args.gen)
        report.latent_fd = latent_fd(generated, reference)
        process_path = Path(args.process) if args.process else sidecar_path(args.data)
        if process_path.exists():
            process = load_process(process_path)
            if process.kind == "gaussian-ar":
                stats = oracle_stats(generated, process)
                for key, value in stats.items():
                    setattr(report, key, value)
    if args.rtf and state is not None:
        base = DecodingPolicy(**state.echo["decode"]) if state.echo and state.echo.get("decode") else DecodingPolicy()
        if state.model.task == "mar":
            base = dataclasses.replace(base, order="random")
        report.rtf = measure_rtf(state.model, dataclasses.replace(base, n=reference[0].n), args.clip_seconds,
                                 seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    logger.info("latent FD %s, held-out loss %s", report.latent_fd, report.heldout_diff_loss)
    return 0


def cmd_schedule_hist(args) -> int:
    schedule = get_schedule(args.preset)
    samples = sample_ratios(schedule, Rng(args.seed, "schedule-hist"), args.samples)
    hist_df = reporting.schedule_histogram(samples, args.bins)
    out = Path(args.out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    reporting.write_histogram_csv(hist_df, out)
    if args.html:
        reporting.save_figure(reporting.schedule_figure(hist_df, schedule, title=args.preset), args.html)
    return 0


def cmd_roundtrip_check(args) -> int:
    geometry = Geometry.parse(args.geometry) if args.geometry else AUDIO_GEOMETRY
    rng = Rng(args.seed, "roundtrip")
    for trial in range(args.trials):
        raw_frames = geometry.frames - (trial % geometry.patch)
        shape = (raw_frames, geometry.bands, geometry.channels)
        latent = LatentMap(rng.normal_array(shape).astype(np.float32))
        padded = pad_frames(latent, geometry.patch, target_frames=geometry.frames)
        restored = unflatten_unpatchify(patchify_flatten(padded, geometry.patch), geometry)
        if not np.array_equal(restored.values, latent.values):
            logger.error("Round trip failed for geometry %s on trial %d", geometry, trial)
            return 1
    logger.info("Round trip is the identity for geometry %s over %d trials (n=%d, h=%d)",
                geometry, args.trials, geometry.n_tokens, geometry.token_dim)
    return 0


def cmd_compare(args) -> int:
    config.apply_threads()
    run = load_run_config(args.config)
    dataset = read_dataset(args.data or run.paths.data)
    eval_set = read_dataset(args.eval_data or run.paths.eval_data)
    _check_data(run, dataset)
    options = dict(policy=run.decode, seeds=tuple(args.seeds), steps=args.steps or run.train.steps,
                   batch_size=run.train.batch_size)
    if args.mode == "tasks":
        summary = compare_tasks(dataset, eval_set, run.model, run.head, **options)
    else:
        summary = decoding_modes(dataset, eval_set, run.model, run.head, budgets=tuple(args.budgets), **options)
    summary["config"] = run.to_dict()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    logger.info("Wrote %s comparison to %s", args.mode, out)
    return 0


# =============================================================================
# PARSER
# =============================================================================
def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mntp", description="Continuous-token language modelling toolkit")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help="logging level (default from LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="synthesise a CVTK dataset and its process sidecar")
    p.add_argument("--process", choices=PROCESS_KINDS, required=True)
    p.add_argument("--count", type=positive_int, required=True)
    p.add_argument("--length", type=positive_int, required=True)
    p.add_argument("--classes", type=positive_int, default=3)
    p.add_argument("--dim", type=positive_int, default=4)
    p.add_argument("--radius", type=float, default=0.8)
    p.add_argument("--noise-std", type=float, default=0.5)
    p.add_argument("--cond-len", type=positive_int, default=2)
    p.add_argument("--cond-dim", type=positive_int, default=8)
    p.add_argument("--geometry", help="FRAMESxBANDSxCHANNELS/PATCH for sinusoid-map")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    for name, func, help_text in (("train", cmd_train, "train a model"),
                                  ("ablate", cmd_ablate, "train one ablation row")):
        p = sub.add_parser(name, help=help_text)
        if name == "ablate":
            p.add_argument("--row", choices=ABLATION_ROWS, required=True)
        p.add_argument("--config")
        p.add_argument("--data")
        p.add_argument("--eval-data")
        p.add_argument("--out")
        p.add_argument("--name", default="model")
        p.set_defaults(func=func)

    p = sub.add_parser("sample", help="generate sequences from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=positive_int, required=True)
    p.add_argument("--count", type=positive_int, default=1)
    p.add_argument("--conditions", help="CVTK file whose conditions are used in turn")
    p.add_argument("--order", choices=ORDERS)
    p.add_argument("--steps", type=positive_int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--diffusion-steps", type=positive_int)
    p.add_argument("--no-cfg", action="store_true")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="write an evaluation report")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True, help="reference CVTK set")
    p.add_argument("--gen", help="generated CVTK set")
    p.add_argument("--process", help="process sidecar (defaults to the one next to --data)")
    p.add_argument("--reps", type=positive_int, default=4)
    p.add_argument("--rtf", action="store_true")
    p.add_argument("--clip-seconds", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=str(Path(config.MNTP_OUT_DIR) / "eval.json"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule-hist", help="histogram of a masking schedule")
    p.add_argument("--preset", choices=sorted(PRESETS), required=True)
    p.add_argument("--bins", type=positive_int, default=50)
    p.add_argument("--samples", type=positive_int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--html")
    p.set_defaults(func=cmd_schedule_hist)

    p = sub.add_parser("roundtrip-check", help="check the codec round trip")
    p.add_argument("--geometry")
    p.add_argument("--trials", type=positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_roundtrip_check)

    p = sub.add_parser("compare", help="compare tasks or decoding modes over seeds")
    p.add_argument("--mode", choices=("tasks", "decoding"), default="tasks")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=positive_int)
    p.add_argument("--budgets", type=positive_int, nargs="+", default=[8])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config.configure_logging(args.log_level)
    try:
        return args.func(args)
    except MNTPError as e:
        logger.error("%s failed: %s", args.command, e)
        return 1
    except OSError as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
