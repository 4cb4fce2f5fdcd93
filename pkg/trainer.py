"""
Training tasks, optimisation loop and checkpoints.

Three tasks share one decoder and head:

  ntp   every slot predicts the next position.
  mntp  a random subset is masked per sequence; with the drop strategy the
        kept tokens predict the next kept position ("predict skip").
  mar   bidirectional masked modelling; masked slots predict themselves.
"""
import json
import logging
import dataclasses
from pathlib import Path

import numpy as np
import torch
from tqdm import tqdm

import reporting
from codec import TokenSequence
from diffusion import HeadConfig, NoiseSchedule, head_loss, schedule_for
from errors import ArgumentError, CapabilityError, ConfigError, DimensionError, FormatError, NumericError
from masking import STRATEGIES, apply_plan, get_schedule, plan_from_mask, sample_plan, sample_ratio
from model import ATTENTION_MODES, FAKE, TASKS, ModelConfig, ModelState
from numerics import Rng, torch_seed

logger = logging.getLogger(__name__)

PREDICTIONS = ("next", "skip", "masked")
WARM_STARTS = ("none", "mar")
CHECKPOINT_FORMAT = "mntp-checkpoint"


@dataclasses.dataclass
class TrainConfig:
    task: str = "mntp"
    schedule: str = "mixture-default"
    strategy: str = "drop"
    predict: str = "skip"
    target_pos_emb: bool = True
    attention: str = "causal"
    batch_size: int = 64
    steps: int = 20000
    lr: float = 1e-4
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.95
    cond_dropout: float = 0.1
    diffusion_reps: int = 4
    seed: int = 0
    eval_every: int = 1000
    log_every: int = 100
    ckpt_every: int = 5000
    warm_start: str = "none"
    warm_start_steps: int = 0

    def validate(self):
        def check(ok, message):
            if not ok:
                raise ConfigError(message)

        check(self.task in TASKS, f"train.task must be one of {TASKS}, got '{self.task}'")
        check(self.strategy in STRATEGIES, f"train.strategy must be one of {STRATEGIES}, got '{self.strategy}'")
        check(self.predict in PREDICTIONS, f"train.predict must be one of {PREDICTIONS}, got '{self.predict}'")
        check(self.attention in ATTENTION_MODES, f"train.attention must be one of {ATTENTION_MODES}")
        check(self.warm_start in WARM_STARTS, f"train.warm_start must be one of {WARM_STARTS}")
        try:
            get_schedule(self.schedule)
        except ArgumentError as e:
            raise ConfigError(str(e)) from e
        check(self.batch_size >= 1 and self.steps >= 0 and self.diffusion_reps >= 1, "batch, steps and reps must be positive")
        check(0.0 <= self.cond_dropout <= 1.0, f"train.cond_dropout {self.cond_dropout} outside [0, 1]")
        check(self.lr > 0, "train.lr must be positive")
        if self.task == "ntp":
            check(self.strategy == "none", "task 'ntp' requires strategy 'none'")
            check(self.predict == "next", "task 'ntp' requires predict 'next'")
            check(self.attention == "causal", "task 'ntp' requires causal attention")
        elif self.task == "mar":
            check(self.attention == "bidirectional", "task 'mar' requires bidirectional attention")
            check(self.strategy in ("zero", "gaussian"), "task 'mar' requires strategy 'zero' or 'gaussian'")
            check(self.predict == "masked", "task 'mar' requires predict 'masked'")
        else:
            check(self.attention == "causal", "task 'mntp' requires causal attention")
            check(self.strategy != "none", "task 'mntp' needs a masking strategy")
            check(self.predict in ("next", "skip"), "task 'mntp' predicts 'next' or 'skip'")
            check(self.predict != "skip" or self.strategy == "drop", "predict 'skip' requires strategy 'drop'")
        check(self.warm_start == "none" or self.task != "mar", "a mar warm start only precedes a causal task")
        return self


def effective_config(cfg: TrainConfig, step: int) -> TrainConfig:
    """The task actually trained at ``step`` (a bidirectional stage first under a mar warm start)."""
    if cfg.warm_start == "mar" and step < cfg.warm_start_steps:
        return dataclasses.replace(cfg, task="mar", strategy="zero", schedule="mar-range",
                                   predict="masked", attention="bidirectional")
    return cfg


# Ablation rows: NTP baselines, MNTP component ablations and the MAR topline.
_ABLATIONS = {
    "a": dict(task="ntp", schedule="none", strategy="none", predict="next", target_pos_emb=False),
    "b": dict(task="ntp", schedule="none", strategy="none", predict="next", target_pos_emb=False,
              warm_start="mar", warm_start_steps=5000),
    "c": dict(strategy="zero", schedule="fixed-0.7", predict="next", target_pos_emb=False),
    "d": dict(strategy="gaussian", schedule="uniform", predict="next", target_pos_emb=False),
    "e": dict(strategy="drop", schedule="mixture-default", predict="next", target_pos_emb=False),
    "f": dict(strategy="zero", schedule="mixture-default", predict="next", target_pos_emb=False),
    "g": dict(),
    "h": dict(schedule="mar-range"),
    "i": dict(target_pos_emb=False),
    "j": dict(),
    "k": dict(task="mar", strategy="zero", schedule="mar-range", predict="masked",
              attention="bidirectional", target_pos_emb=False),
}
ABLATION_ROWS = tuple(sorted(_ABLATIONS))
ABLATION_FLAGS = ("task", "schedule", "strategy", "predict", "target_pos_emb", "attention",
                  "warm_start", "warm_start_steps")


def make_ablation_config(row: str, base: TrainConfig = None, **overrides) -> TrainConfig:
    """
    Config for one ablation row. Row j (random initialisation) coincides
    with g since every model here starts from random weights.

    Settings outside the ablation flags (steps, batch size, seed, ...) come
    from ``base`` and then ``overrides``.
    """
    key = str(row).lower()
    if key not in _ABLATIONS:
        raise ArgumentError(f"unknown ablation row '{row}'; expected one of {', '.join(ABLATION_ROWS)}")
    kept = {}
    if base is not None:
        kept = {k: v for k, v in dataclasses.asdict(base).items() if k not in ABLATION_FLAGS}
    return TrainConfig(**{**kept, **_ABLATIONS[key], **overrides}).validate()


# =============================================================================
# STATE
# =============================================================================
@dataclasses.dataclass
class TrainState:
    model: ModelState
    schedule: NoiseSchedule
    optimizer: torch.optim.Optimizer
    rng: Rng
    train_config: TrainConfig
    step: int = 0
    echo: dict = None

    @property
    def inference_only(self) -> bool:
        return self.optimizer is None


def sync_model_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ModelConfig:
    return dataclasses.replace(model_cfg, attention=train_cfg.attention, target_pos_emb=train_cfg.target_pos_emb)


def make_optimizer(model: ModelState, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


def build_state(model_cfg: ModelConfig, head_cfg: HeadConfig, train_cfg: TrainConfig, echo: dict = None) -> TrainState:
    """Fresh, randomly initialised model with its optimizer and random streams."""
    train_cfg.validate()
    model_cfg = sync_model_config(model_cfg, train_cfg)
    torch.manual_seed(torch_seed(train_cfg.seed, "init"))
    model = ModelState(model_cfg, head_cfg, task=train_cfg.task)
    model.initialize_weights()
    logger.info("Built %s model with %d parameters", train_cfg.task, model.parameter_count())
    return TrainState(
        model=model,
        schedule=schedule_for(head_cfg),
        optimizer=make_optimizer(model, train_cfg),
        rng=Rng(train_cfg.seed, "train"),
        train_config=train_cfg,
        echo=echo,
    )


# =============================================================================
# BATCH ASSEMBLY
# =============================================================================
@dataclasses.dataclass
class Assembled:
    inputs: np.ndarray  # (k, h)
    content: np.ndarray  # (k,)
    target: np.ndarray  # (k,)
    bos_target: int
    loss_slots: list  # (slot, target position); slot 0 is BOS
    condition: object


def assemble(seq: TokenSequence, cfg: TrainConfig, rng: Rng) -> Assembled:
    """Mask one sequence and derive its content/target indices and loss slots."""
    n = seq.n
    if cfg.task == "ntp":
        plan = plan_from_mask(np.ones(n, dtype=np.int8), "none")
    else:
        ratio = sample_ratio(get_schedule(cfg.schedule), rng.stream("ratio"))
        plan = sample_plan(n, ratio, cfg.strategy, rng.stream("mask"))
    inputs, content = apply_plan(seq.tokens, plan, rng.stream("mask-fill"))

    if cfg.predict == "masked":
        target = content.copy()
        bos_target = 0
        masked = set(plan.masked)
        slots = [(j + 1, int(c)) for j, c in enumerate(content) if int(c) in masked]
    elif cfg.predict == "skip":
        target = np.asarray(plan.targets, dtype=np.int64)
        bos_target = plan.bos_target
        slots = [(0, bos_target)] + [(j + 1, int(t)) for j, t in enumerate(target)]
    else:
        target = content + 1
        bos_target = 1
        slots = [(0, 1)] + [(j + 1, int(t)) for j, t in enumerate(target)]
    slots = [(s, t) for s, t in slots if 1 <= t <= n]

    drop = rng.stream("cond-drop").random() < cfg.cond_dropout
    return Assembled(inputs, content.astype(np.int64), target.astype(np.int64), bos_target, slots,
                     FAKE if drop else seq.condition)


def sample_batch(state: TrainState, dataset: list) -> list:
    idx = state.rng.stream("data").integers(0, len(dataset), size=state.train_config.batch_size)
    return [dataset[int(i)] for i in idx]


def batch_loss(state: TrainState, batch: list, cfg: TrainConfig, rng: Rng):
    """Mean diffusion loss over all loss slots of a batch, or None without slots."""
    lengths = {seq.n for seq in batch}
    if len(lengths) != 1:
        raise DimensionError(f"batch mixes sequence lengths {sorted(lengths)}")
    parts = [assemble(seq, cfg, rng) for seq in batch]
    B, h = len(parts), batch[0].h
    K = max(p.inputs.shape[0] for p in parts)
    tokens = np.zeros((B, K, h), dtype=np.float32)
    content = np.zeros((B, K), dtype=np.int64)
    target = np.zeros((B, K), dtype=np.int64)
    valid = np.zeros((B, K), dtype=bool)
    for b, p in enumerate(parts):
        k = p.inputs.shape[0]
        tokens[b, :k], content[b, :k], target[b, :k], valid[b, :k] = p.inputs, p.content, p.target, True

    rows, cols, goals = [], [], []
    for b, p in enumerate(parts):
        for slot, position in p.loss_slots:
            rows.append(b)
            cols.append(slot)
            goals.append(batch[b].tokens[position - 1])
    if not rows:
        return None

    decoder = state.model.decoder
    dtype = decoder.content_pos.dtype
    prefix = decoder.condition_prefix([p.condition for p in parts])
    z = decoder.encode_context(
        prefix,
        torch.from_numpy(tokens).to(dtype),
        torch.from_numpy(content),
        torch.from_numpy(target),
        torch.tensor([p.bos_target for p in parts], dtype=torch.long),
        causal=cfg.attention == "causal",
        valid=torch.from_numpy(valid),
    )
    z = z[torch.tensor(rows), torch.tensor(cols)]
    x = torch.from_numpy(np.stack(goals)).to(z.dtype)
    reps = cfg.diffusion_reps
    return head_loss(state.model.head, z.repeat(reps, 1), x.repeat(reps, 1), rng, state.schedule)


def train_step(state: TrainState, batch: list, cfg: TrainConfig = None, rng: Rng = None) -> float:
    """One optimiser update; returns the batch loss."""
    if state.inference_only:
        raise CapabilityError("checkpoint was loaded without optimizer moments (inference-only)")
    cfg = cfg or effective_config(state.train_config, state.step)
    rng = rng or state.rng
    loss = batch_loss(state, batch, cfg, rng)
    if loss is None:
        logger.debug("Step %d has no loss slots; skipping update", state.step)
        state.step += 1
        return 0.0
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at step {state.step}", step=state.step)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return float(loss.detach())


def fit(state: TrainState, dataset: list, out_dir, eval_set: list = None, name: str = "model",
        progress: bool = True) -> list:
    """Train to ``train_config.steps``, writing loss.csv and checkpoints into ``out_dir``."""
    from evaluation import heldout_diffusion_loss

    cfg = state.train_config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    logger.info("Training %s for %d steps from step %d", cfg.task, cfg.steps, state.step)
    for _ in tqdm(range(state.step, cfg.steps), disable=not progress, desc=cfg.task):
        loss = train_step(state, sample_batch(state, dataset))
        records.append((state.step, loss))
        if cfg.log_every and state.step % cfg.log_every == 0:
            logger.info("step %d loss %.6f", state.step, loss)
        if eval_set and cfg.eval_every and state.step % cfg.eval_every == 0:
            held = heldout_diffusion_loss(state.model, eval_set, state.schedule, seed=cfg.seed)
            logger.info("step %d held-out diffusion loss %.6f", state.step, held)
        if cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
            save_checkpoint(state, out_dir / f"{name}-step{state.step}")
    reporting.write_loss_csv(records, out_dir / "loss.csv")
    save_checkpoint(state, out_dir / name)
    return records


# =============================================================================
# CHECKPOINTS
# =============================================================================
def _manifest_path(path) -> Path:
    return Path(f"{path}.manifest.json")


def _blob_path(path) -> Path:
    return Path(f"{path}.blob")


def _collect_tensors(state: TrainState):
    tensors = [(f"model/{k}", v) for k, v in state.model.state_dict().items()]
    steps = {}
    if state.optimizer is not None:
        for pname, p in state.model.named_parameters():
            moments = state.optimizer.state.get(p)
            if not moments:
                continue
            tensors.append((f"optim/{pname}/exp_avg", moments["exp_avg"]))
            tensors.append((f"optim/{pname}/exp_avg_sq", moments["exp_avg_sq"]))
            steps[pname] = float(moments["step"])
    return tensors, steps


def save_checkpoint(state: TrainState, path):
    """Write ``<path>.manifest.json`` and ``<path>.blob``."""
    tensors, optim_steps = _collect_tensors(state)
    table, chunks, offset = {}, [], 0
    for name, tensor in tensors:
        data = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4").tobytes()
        table[name] = {"shape": list(tensor.shape), "dtype": "float32", "offset": offset, "length": len(data)}
        chunks.append(data)
        offset += len(data)
    cfg = state.train_config
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 2,
        "step": state.step,
        "seed": cfg.seed,
        "task": state.model.task,
        "model_config": dataclasses.asdict(state.model.model_cfg),
        "head_config": dataclasses.asdict(state.model.head_cfg),
        "train_config": dataclasses.asdict(cfg),
        "optimizer": None if state.optimizer is None else {"steps": optim_steps},
        "rng": state.rng.get_state(),
        "echo": state.echo,
        "tensors": table,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _blob_path(path).write_bytes(b"".join(chunks))
    _manifest_path(path).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info("Saved checkpoint at step %d to %s", state.step, path)


def load_checkpoint(path) -> TrainState:
    try:
        manifest = json.loads(_manifest_path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read checkpoint manifest {_manifest_path(path)}: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{_manifest_path(path)} is not a checkpoint manifest")
    blob = _blob_path(path).read_bytes()

    table = manifest["tensors"]
    if not isinstance(table, dict):
        raise FormatError(f"{_manifest_path(path)}: tensors must map names to entries")
    expected = sum(entry["length"] for entry in table.values())
    if expected != len(blob):
        raise FormatError(f"blob holds {len(blob)} bytes but the manifest lists {expected}", offset=len(blob))
    arrays = {}
    for name, entry in table.items():
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["length"] != 4 * count or entry["offset"] + entry["length"] > len(blob):
            raise FormatError(f"tensor {name} does not fit the blob", offset=entry["offset"])
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        arrays[name] = torch.from_numpy(flat.reshape(entry["shape"]).astype(np.float32))

    model_cfg = ModelConfig(**manifest["model_config"])
    head_cfg = HeadConfig(**manifest["head_config"])
    train_cfg = TrainConfig(**manifest["train_config"])
    model = ModelState(model_cfg, head_cfg, task=manifest["task"])
    weights = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    missing = set(model.state_dict()) - set(weights)
    if missing:
        raise FormatError(f"checkpoint lacks weights {sorted(missing)}")
    model.load_state_dict(weights)

    optimizer = None
    optim_info = manifest.get("optimizer")
    optim_steps = (optim_info or {}).get("steps") or {}
    names = [n for n, _ in model.named_parameters()]
    has_moments = all(f"optim/{n}/exp_avg" in arrays and f"optim/{n}/exp_avg_sq" in arrays for n in optim_steps)
    if optim_info is not None and has_moments:
        optimizer = make_optimizer(model, train_cfg)
        opt_state = optimizer.state_dict()
        opt_state["state"] = {
            i: {
                "step": torch.tensor(optim_steps[n], dtype=torch.float32),
                "exp_avg": arrays[f"optim/{n}/exp_avg"],
                "exp_avg_sq": arrays[f"optim/{n}/exp_avg_sq"],
            }
            for i, n in enumerate(names) if n in optim_steps
        }
        optimizer.load_state_dict(opt_state)
    else:
        logger.warning("Checkpoint %s has no optimizer moments; loaded as inference-only", path)

    rng_state = manifest["rng"]
    return TrainState(
        model=model,
        schedule=schedule_for(head_cfg),
        optimizer=optimizer,
        rng=Rng.from_state(rng_state),
        train_config=train_cfg,
        step=int(manifest["step"]),
        echo=manifest.get("echo"),
    )
