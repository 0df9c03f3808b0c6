"""Staged training, exact-match evaluation and the ablation sweep.

Stages, in order:

``host_pretrain`` (optional)
    text-only reading-comprehension pretraining of the host LM base, a
    stand-in for starting from a pretrained language model.
``mlp_caption`` (optional)
    captioning warm-up for the visual projection.
``vka_pretrain``
    the VKA learns to generate an image's knowledge text.
``vka_align``
    only the query tokens and knowledge projection train, so that the
    frozen host can read the knowledge text back out of ``h_KO``.
``instruction_tune``
    adapters, FKA, projection and VKA train on answer tokens.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import ATTRIBUTES, SEP, normalize
from .errors import ConfigError, DependencyError, NonFiniteError
from .model import CVLM
from .numerics import AdamW, Tape, Tensor, clip_by_global_norm, cosine_lr, cross_entropy

STAGES = ("host_pretrain", "mlp_caption", "vka_pretrain", "vka_align", "instruction_tune")

STAGE_GROUPS = {
    "host_pretrain": ("hostlm",),
    "mlp_caption": ("mlp",),
    "vka_pretrain": ("vision", "vka"),
    "vka_align": ("vka",),
    "instruction_tune": ("fka", "lora", "mlp", "vka"),
}

DEFAULT_LR = {
    "host_pretrain": {"hostlm": 2e-3},
    "mlp_caption": {"mlp": 1e-4},
    "vka_pretrain": {"vision": 5e-5, "vka": 5e-5},
    "vka_align": {"vka": 1e-4},
    "instruction_tune": {"fka": 1e-4, "lora": 1e-4, "mlp": 2e-5, "vka": 2e-5},
}

DEFAULT_BATCH = {"host_pretrain": 32, "mlp_caption": 16, "vka_pretrain": 16, "vka_align": 8,
                 "instruction_tune": 8}

PREREQUISITE = {"vka_align": "vka_pretrain", "instruction_tune": "vka_align"}

MAX_PREFIX_SHIFT = 32

ALIGN_PARAMS = ("vka.query_tokens", "vka.knowledge_proj.")


def is_trainable(stage, param):
    """Trainability rule for one parameter in one stage."""
    if stage == "vka_pretrain":
        return param.group == "vision" or (param.group == "vka"
                                           and not param.name.startswith(ALIGN_PARAMS))
    if stage == "vka_align":
        return param.name.startswith(ALIGN_PARAMS)
    if stage == "instruction_tune":
        return param.group in STAGE_GROUPS[stage]
    if stage == "mlp_caption":
        return param.group == "mlp"
    if stage == "host_pretrain":
        return param.group == "hostlm"
    raise ConfigError(f"unknown stage {stage!r}")


def trainability_matrix(model):
    """``{stage: {group: bool}}``; a group counts as trainable if any member is."""
    groups = sorted({p.group for p in model.parameters()})
    return {s: {g: any(is_trainable(s, p) for p in model.parameters() if p.group == g)
                for g in groups} for s in STAGES}


def apply_trainability(model, stage):
    for p in model.parameters():
        p.trainable = is_trainable(stage, p)
    return [p for p in model.parameters() if p.trainable]


def checksums(model, trainable=None):
    """Raw parameter bytes by name, for exact before/after comparison."""
    return {p.name: p.data.tobytes() for p in model.parameters()
            if trainable is None or p.trainable == trainable}


@dataclass
class StageConfig:
    stage: str
    steps: int = 100
    batch_size: int | None = None
    lr: dict | None = None
    warmup: float = 0.03
    seed: int = 0
    loss_reduction: str = "mean"
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0
    align_with_image_tokens: bool = False  # vka_align only: prepend h_IO to h_KO

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.batch_size is None:
            self.batch_size = DEFAULT_BATCH[self.stage]
        if self.lr is None:
            self.lr = dict(DEFAULT_LR[self.stage])
        if set(self.lr) != set(STAGE_GROUPS[self.stage]):
            raise ConfigError(f"stage {self.stage} lr map must cover exactly "
                              f"{sorted(STAGE_GROUPS[self.stage])}, got {sorted(self.lr)}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"loss_reduction must be mean or sum, got {self.loss_reduction!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("warmup is a fraction of total steps in [0, 1)")

    @property
    def warmup_steps(self):
        return int(round(self.warmup * self.steps))

    def lr_at(self, group, step):
        return cosine_lr(step, self.steps, self.warmup_steps, self.lr[group])


@dataclass
class TrainState:
    """Resumable position inside one stage."""

    stage: str
    step: int = 0
    optimizer: AdamW = field(default_factory=AdamW)
    best: dict = field(default_factory=dict)


def batch_indices(seed, n, batch_size, step):
    """Rows of the ``step``-th batch from an endless stream of seeded epochs.

    A pure function of its arguments, so resuming needs only the step.
    """
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        out.extend(perm[offset:offset + batch_size - len(out)])
    return np.asarray(out)


def pad_rows(rows, pad_id):
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
    return ids


# -------------------------------------------------------------- stage tasks

class _Task:
    """Tokenised dataset plus the stage's loss, with cached frozen features."""

    def __init__(self, stage, model, data, with_image_tokens=False):
        self.stage = stage
        self.with_image_tokens = with_image_tokens
        self.model = model
        self.n = len(data)
        if self.n == 0:
            raise ConfigError(f"stage {stage} has no training data")
        tok = model.tokenizer
        self.image_cache = None
        self.crop_cache = None
        if stage == "host_pretrain":
            self._init_text(data, tok)
            return
        self.pixels = np.stack([d.image.pixels for d in data])
        if stage != "vka_pretrain":
            self.image_cache = model.encode_images(self.pixels).data
        if stage == "vka_pretrain":
            self.targets = pad_rows([tok.encode(d.knowledge) + [tok.eos] for d in data], tok.pad)
        elif stage in ("vka_align", "mlp_caption"):
            self.text = pad_rows([[tok.bos] + tok.encode(d.knowledge) + [tok.eos]
                                  for d in data], tok.pad)
        else:
            q = [tok.encode(d.question) for d in data]
            a = [tok.encode(d.answer) + [tok.eos] for d in data]
            self.questions = pad_rows(q, tok.pad)
            self.q_mask = np.zeros(self.questions.shape, dtype=bool)
            for i, r in enumerate(q):
                self.q_mask[i, :len(r)] = True
            self.text = pad_rows([[tok.bos] + qi + ai for qi, ai in zip(q, a)], tok.pad)
            # answer weight at target position t (predicting text[t + 1])
            self.answer_w = np.zeros((self.n, self.text.shape[1] - 1))
            for i, (qi, ai) in enumerate(zip(q, a)):
                self.answer_w[i, len(qi):len(qi) + len(ai)] = 1.0
            if model.uses_bank:
                crops, _ = model.crop_pixels([d.image for d in data])
                self.crop_cache = model.encode_images(crops).data

    def _init_text(self, lines, tok):
        """Host corpus lines laid out like stage-2/3 host input.

        A line ``fact <sep> continuation`` becomes ``fact <s> continuation </s>``:
        the fact plays the part of the knowledge prefix and the continuation
        the part of the text after BOS, so reading circuits learned here
        carry over once the prefix is ``h_KO``. Only the continuation carries
        loss. Each row is shifted right by a seeded run of pads so the host
        also sees the absolute positions its text occupies behind image and
        knowledge rows.
        """
        rows, starts = [], []
        for line in lines:
            fact, sep, rest = line.partition(f" {SEP} ")
            if not sep:
                raise ConfigError(f"host corpus line has no {SEP}: {line!r}")
            head = tok.encode(fact)
            rows.append(head + [tok.bos] + tok.encode(rest) + [tok.eos])
            starts.append(len(head))
        longest = max(len(r) for r in rows)
        room = max(0, min(MAX_PREFIX_SHIFT, self.model.host.cfg.max_seq_len - longest))
        shifts = np.random.default_rng([len(rows), 6]).integers(0, room + 1, size=len(rows))
        self.text = pad_rows([[tok.pad] * int(o) + r for o, r in zip(shifts, rows)], tok.pad)
        self.text_w = np.zeros((len(rows), self.text.shape[1] - 1))
        for i, (o, r, j) in enumerate(zip(shifts, rows, starts)):
            # target position t predicts text[t + 1]; position o + j holds BOS
            self.text_w[i, o + j:o + len(r) - 1] = 1.0

    def loss(self, idx, reduction):
        m = self.model
        tok = m.tokenizer
        if self.stage == "host_pretrain":
            text = self.text[idx]
            logits = m.host(None, None, text[:, :-1])
            return cross_entropy(logits, text[:, 1:], self.text_w[idx], reduction)
        if self.stage == "vka_pretrain":
            image_seq = m.encode_images(self.pixels[idx])
            tgt = self.targets[idx]
            logits = m.vka.pretrain_logits(image_seq, tgt)
            return cross_entropy(logits, tgt, tgt != tok.pad, reduction)
        image_seq = Tensor(self.image_cache[idx])
        text = self.text[idx]
        inp, tgt = text[:, :-1], text[:, 1:]
        if self.stage == "vka_align":
            logits = m.knowledge_logits(image_seq, inp, self.with_image_tokens)
            return cross_entropy(logits, tgt, tgt != tok.pad, reduction)
        if self.stage == "mlp_caption":
            logits = m.caption_logits(image_seq, inp)
            return cross_entropy(logits, tgt, tgt != tok.pad, reduction)
        crops = None
        if self.crop_cache is not None:
            k = m.cfg.fka.n_regions
            crops = Tensor(self.crop_cache[(idx[:, None] * k + np.arange(k)).reshape(-1)])
        logits = m.answer_logits(image_seq, crops, self.questions[idx], self.q_mask[idx], inp)
        return cross_entropy(logits, tgt, self.answer_w[idx], reduction)


def check_prerequisites(stage, model):
    need = PREREQUISITE.get(stage)
    if need and need not in model.completed_stages:
        raise DependencyError(f"stage {stage} needs a model that completed {need}; "
                              f"load a {need} checkpoint first")


def run_stage(cfg: StageConfig, model, data, state=None, stop_at=None, require_prior=True,
              on_step=None):
    """Train ``model`` in place for one stage.

    Resumes from ``state`` when given and stops early at ``stop_at``.
    Returns ``(rows, state)`` where each row is one logged step
    (step, stage, loss, lr_<group>..., grad_norm).
    """
    if require_prior:
        check_prerequisites(cfg.stage, model)
    if state is None:
        state = TrainState(cfg.stage, optimizer=AdamW(weight_decay=cfg.weight_decay))
    elif state.stage != cfg.stage:
        raise ConfigError(f"train state belongs to stage {state.stage}, not {cfg.stage}")
    params = apply_trainability(model, cfg.stage)
    task = _Task(cfg.stage, model, data, cfg.align_with_image_tokens)
    groups = sorted(cfg.lr)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    rows = []
    while state.step < end:
        step = state.step
        idx = batch_indices(cfg.seed, task.n, cfg.batch_size, step)
        with Tape() as tape:
            loss = task.loss(idx, cfg.loss_reduction)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteError(f"stage {cfg.stage}: non-finite loss at step {step}")
        grads = {p.name: g for p, g in tape.backward(loss).items()}
        grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
        lr_group = {g: cfg.lr_at(g, step) for g in groups}
        state.optimizer.step(params, grads, {p.name: lr_group[p.group] for p in params})
        state.step += 1
        row = {"step": step, "stage": cfg.stage, "loss": value}
        row.update({f"lr_{g}": lr_group[g] for g in groups})
        row["grad_norm"] = norm
        rows.append(row)
        if on_step is not None:
            on_step(row)
    if state.step >= cfg.steps and cfg.stage not in model.completed_stages:
        model.completed_stages.append(cfg.stage)
    return rows, state


def write_metrics(path, rows, append=False):
    if not rows:
        return
    fields = list(rows[0])
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        if not append or fh.tell() == 0:
            w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# --------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    categories: list  # (category, n, accuracy or None)
    aggregate: tuple  # (n, accuracy or None)
    predictions: list

    def accuracy(self, category=None):
        if category is None:
            return self.aggregate[1]
        return {c: a for c, _, a in self.categories}[category]


def predict(model, samples, batch_size=64, max_new_tokens=4):
    """Greedy answer strings for ``samples``."""
    tok = model.tokenizer
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        image_seq = model.encode_images(np.stack([s.image.pixels for s in chunk]))
        crops = None
        if model.uses_bank:
            crops = model.encode_images(model.crop_pixels([s.image for s in chunk])[0])
        ids = model.generate_answers(image_seq, crops, [s.question for s in chunk],
                                     max_new_tokens)
        out.extend(tok.decode(i) for i in ids)
    return out


def evaluate(model, samples, batch_size=64, max_new_tokens=4):
    """Exact match after whitespace normalisation, per category and overall.

    Categories with no samples report ``None`` (written as ``n/a``).
    """
    preds = predict(model, samples, batch_size, max_new_tokens) if samples else []
    hits = [normalize(p) == normalize(s.answer) for p, s in zip(preds, samples)]
    cats = list(ATTRIBUTES) + sorted({s.category for s in samples} - set(ATTRIBUTES))
    rows = []
    for c in cats:
        h = [ok for ok, s in zip(hits, samples) if s.category == c]
        rows.append((c, len(h), (sum(h) / len(h)) if h else None))
    agg = (len(hits), (sum(hits) / len(hits)) if hits else None)
    return EvalResult(rows, agg, preds)


def _fmt(acc):
    return "n/a" if acc is None else f"{acc:.6f}"


def write_eval_csv(path, result):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "n", "accuracy"])
        for c, n, a in result.categories:
            w.writerow([c, n, _fmt(a)])
        w.writerow(["all", result.aggregate[0], _fmt(result.aggregate[1])])


def write_plot_data(path, result):
    """Bar-chart ready ``x,y`` pairs (category index, accuracy); n/a rows skipped."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "label", "y"])
        for i, (c, _, a) in enumerate(result.categories):
            if a is not None:
                w.writerow([i, c, _fmt(a)])


# ------------------------------------------------------------------- sweep

def derive_model(base, use_vka, ld):
    """A copy of ``base`` rebuilt for one ablation cell.

    Shared parameters are copied by name; components new to the cell keep
    their seeded initialisation.
    """
    cfg = copy.deepcopy(base.cfg)
    cfg.use_vka = use_vka
    cfg.fka.per_layer_len = ld
    cell = CVLM(cfg, base.tokenizer)
    src = dict(base.named_parameters())
    for name, p in cell.named_parameters():
        if name in src:
            p.data = src[name].data.copy()
    cell.completed_stages = list(base.completed_stages)
    cell.lora_merged = base.lora_merged
    return cell


def ablation_sweep(base, stage_cfg, train, eval_sets, lds=(0, 2, 4, 8),
                   vka_modes=(True, False)):
    """Instruction-tune and evaluate one cell per ``(use_vka, ld)`` pair.

    Every cell starts from the same ``base`` weights and uses the same seed
    and batch order. Returns a list of result dicts, one per cell.
    """
    results = []
    for use_vka in vka_modes:
        for ld in lds:
            cell = derive_model(base, use_vka, ld)
            rows, _ = run_stage(stage_cfg, cell, train)
            evals = {name: evaluate(cell, samples) for name, samples in eval_sets.items()}
            results.append({"use_vka": use_vka, "ld": ld, "final_loss": rows[-1]["loss"],
                            "evals": evals})
    return results


def write_sweep_csv(path, results):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["use_vka", "ld", "split", "category", "n", "accuracy"])
        for r in results:
            for split, ev in r["evals"].items():
                for c, n, a in ev.categories + [("all",) + ev.aggregate]:
                    w.writerow(["on" if r["use_vka"] else "off", r["ld"], split, c, n, _fmt(a)])
