"""Training and evaluation protocol.

Five folds rotate over five utterance groups (3 train / 1 dev / 1 test);
each fold trains with Adam under gradient clipping, early-stops on dev
weighted accuracy, and reports test metrics from the best epoch's weights.
The whole protocol repeats over seeds and reports mean and population
standard deviation.  Fold jobs are self-contained and can run in worker
processes; only finished metrics cross process boundaries.
"""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .config import HarnessConfig, LABELS, ModelConfig, RunConfig
from .data import batches
from .errors import NumericError, TrainingDiverged, ValidationError
from .fusion import build_fusion_model
from .model import MultilevelTransformer, save_checkpoint
from .text import WordVectors


class Adam:
    """Bias-corrected Adam over named parameters.

    The update is theta -= lr * mhat / (sqrt(vhat) + eps).  A non-finite
    gradient aborts immediately, naming the parameter, since continuing
    would silently poison the moments.
    """

    def __init__(self, named_params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.items = [(name, p) for name, p in named_params]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.items]
        self.v = [np.zeros_like(p.data) for _, p in self.items]

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for (name, p), m, v in zip(self.items, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = total ** 0.5
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# splitting

@dataclass
class FoldPlan:
    fold: int
    train_ids: list
    dev_ids: list
    test_ids: list


def _session_groups(records):
    groups = {}
    for r in records:
        groups.setdefault(r.session, []).append(r.id)
    # pack sessions into exactly 5 buckets, largest session first, always
    # into the currently smallest bucket; deterministic via (-size, name)
    ordered = sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    buckets = [[] for _ in range(5)]
    for _, ids in ordered:
        smallest = min(range(5), key=lambda b: (len(buckets[b]), b))
        buckets[smallest].extend(ids)
    return buckets


def _stratified_random_groups(records, seed):
    rng = np.random.default_rng(seed)
    by_label = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r.id)
    buckets = [[] for _ in range(5)]
    for label in sorted(by_label):
        ids = sorted(by_label[label])
        rng.shuffle(ids)
        for i, utt_id in enumerate(ids):
            buckets[i % 5].append(utt_id)
    return buckets


def kfold_split(manifest, seed=0, group_mode="auto"):
    """Five rotated 3/1/1 fold plans over five utterance groups.

    Groups come from session metadata when every record carries it (more
    than five sessions are packed into five balanced buckets); otherwise
    label-stratified random groups are drawn from the seed.
    """
    records = manifest.records
    if group_mode == "auto":
        group_mode = "session" if manifest.has_sessions else "random"
    if group_mode == "session":
        if not manifest.has_sessions:
            raise ValidationError(
                "records lack session metadata; rerun with random grouping "
                "(group_mode=random)")
        sessions = {r.session for r in records}
        if len(sessions) < 5:
            raise ValidationError(
                f"only {len(sessions)} sessions, need 5 groups; rerun with "
                "random grouping (group_mode=random)")
        groups = _session_groups(records)
    else:
        groups = _stratified_random_groups(records, seed)
    if any(len(g) == 0 for g in groups):
        raise ValidationError("a fold group came out empty; dataset too small for 5 folds")

    plans = []
    for i in range(5):
        train = groups[i % 5] + groups[(i + 1) % 5] + groups[(i + 2) % 5]
        plans.append(FoldPlan(fold=i, train_ids=list(train),
                              dev_ids=list(groups[(i + 3) % 5]),
                              test_ids=list(groups[(i + 4) % 5])))
    return plans


# ---------------------------------------------------------------------------
# metrics

@dataclass
class FoldMetrics:
    wa: float
    ua: float
    per_class_recall: list
    confusion: np.ndarray


def metrics_from_confusion(confusion) -> FoldMetrics:
    """WA is overall accuracy; UA averages recall over classes with support."""
    conf = np.asarray(confusion, dtype=np.int64)
    total = conf.sum()
    if total == 0:
        raise ValidationError("empty confusion matrix")
    support = conf.sum(axis=1)
    recalls = [conf[k, k] / support[k] if support[k] else None
               for k in range(conf.shape[0])]
    present = [r for r in recalls if r is not None]
    return FoldMetrics(
        wa=float(np.trace(conf)) / float(total),
        ua=float(np.mean(present)),
        per_class_recall=recalls,
        confusion=conf)


def evaluate(model, encs) -> FoldMetrics:
    """Argmax predictions over an evaluation set; ties break to the first class."""
    if not encs:
        raise ValidationError("evaluation set is empty")
    was_training = model.training
    model.eval()
    k = model.head.n_out
    conf = np.zeros((k, k), dtype=np.int64)
    with ag.no_grad():
        for enc in encs:
            logits = model.forward_utterance(enc).logits.data
            conf[enc.label, int(np.argmax(logits))] += 1
    if was_training:
        model.train()
    return metrics_from_confusion(conf)


# ---------------------------------------------------------------------------
# training one fold

@dataclass
class TrainResult:
    fold: int
    seed: int
    test: FoldMetrics
    dev_history: list
    best_epoch: int
    epochs_run: int
    checkpoint_path: str = None


def build_model(model_cfg: ModelConfig, hcfg: HarnessConfig, word_vectors: WordVectors,
                seed: int, utt_dim=None):
    if hcfg.granularity == "multi":
        return build_fusion_model(model_cfg, word_vectors, utt_dim=utt_dim,
                                  seed=seed, freeze_fine=hcfg.freeze_fine)
    return MultilevelTransformer(model_cfg, word_vectors, seed=seed)


def train_epochs(model, train_encs, dev_encs, hcfg: HarnessConfig, seed,
                 out_dir=None, tag="model"):
    """Epoch loop with early stopping on dev WA; returns (best_state,
    dev_history, best_epoch, epochs_run, checkpoint_path)."""
    shuffle_rng = np.random.default_rng(seed)
    opt = Adam(model.trainable_named_parameters(), lr=hcfg.lr)
    trainable = [p for _, p in model.trainable_named_parameters()]
    best_wa = -1.0
    best_state = model.state_dict()
    best_epoch = 0
    since_best = 0
    history = []
    ckpt_path = None

    def checkpoint():
        nonlocal ckpt_path
        if out_dir is None:
            return None
        path = Path(out_dir) / f"{tag}-best.ckpt"
        current = model.state_dict()
        model.load_state_dict(best_state)
        extra = {"seed": seed, "granularity": hcfg.granularity,
                 "freeze_fine": hcfg.freeze_fine, "best_epoch": best_epoch}
        if hasattr(model, "utt_dim"):
            extra["utt_dim"] = model.utt_dim
            extra["builtin_encoder"] = model.utt_encoder is not None
        cfg = model.cfg if hasattr(model, "cfg") else model.fine.cfg
        save_checkpoint(path, model, cfg, extra=extra)
        model.load_state_dict(current)
        ckpt_path = str(path)
        return ckpt_path

    for epoch in range(1, hcfg.max_epochs + 1):
        model.train()
        for batch in batches(train_encs, hcfg.batch_size, rng=shuffle_rng):
            logits = ag.stack_rows(
                [model.forward_utterance(e, pad_words=pw, pad_frames=pf).logits
                 for e, pw, pf in batch])
            loss = ag.cross_entropy(logits, [e.label for e, _, _ in batch])
            if not np.isfinite(loss.data):
                checkpoint()
                raise TrainingDiverged(
                    f"loss became {loss.data} in epoch {epoch}; "
                    f"last good checkpoint: {ckpt_path or 'none saved'}")
            ag.backward(loss)
            clip_gradients(trainable, hcfg.clip_norm)
            opt.step()
        dev_wa = evaluate(model, dev_encs).wa
        history.append(dev_wa)
        if dev_wa > best_wa:
            best_wa = dev_wa
            best_state = model.state_dict()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > hcfg.patience:
                break

    model.load_state_dict(best_state)
    checkpoint()
    return best_state, history, best_epoch, len(history), ckpt_path


def train_fold(plan: FoldPlan, encs_by_id, model_cfg: ModelConfig, hcfg: HarnessConfig,
               word_vectors: WordVectors, seed=0, utt_dim=None, out_dir=None) -> TrainResult:
    model = build_model(model_cfg, hcfg, word_vectors, seed=100000 * seed + plan.fold,
                        utt_dim=utt_dim)
    train_encs = [encs_by_id[i] for i in plan.train_ids]
    dev_encs = [encs_by_id[i] for i in plan.dev_ids]
    test_encs = [encs_by_id[i] for i in plan.test_ids]
    _, history, best_epoch, epochs_run, ckpt = train_epochs(
        model, train_encs, dev_encs, hcfg, seed=100000 * seed + plan.fold,
        out_dir=out_dir, tag=f"seed{seed}-fold{plan.fold}")
    test = evaluate(model, test_encs)
    return TrainResult(fold=plan.fold, seed=seed, test=test, dev_history=history,
                       best_epoch=best_epoch, epochs_run=epochs_run,
                       checkpoint_path=ckpt)


# ---------------------------------------------------------------------------
# protocol over folds and seeds

def _worker_count(requested):
    cap = os.environ.get("MELFORMER_NUM_WORKERS")
    if cap is not None:
        requested = min(requested, max(1, int(cap)))
    return max(1, requested)


def _run_job(args):
    plan, encs_by_id, model_cfg, hcfg, word_vectors, seed, utt_dim, out_dir = args
    return train_fold(plan, encs_by_id, model_cfg, hcfg, word_vectors,
                      seed=seed, utt_dim=utt_dim, out_dir=out_dir)


def run_protocol(encs, plans, model_cfg: ModelConfig, hcfg: HarnessConfig,
                 word_vectors: WordVectors, utt_dim=None, out_dir=None):
    """All folds for every seed; returns (results list, summary dict)."""
    encs_by_id = {e.id: e for e in encs}
    jobs = [(plan, encs_by_id, model_cfg, hcfg, word_vectors, seed, utt_dim, out_dir)
            for seed in hcfg.seeds for plan in plans]
    workers = _worker_count(hcfg.workers)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    return results, summarize(results, hcfg.seeds)


def format_mean_std(mean, std):
    return f"{mean:.3f} ± {std:.3f}"


def summarize(results, seeds):
    """Per-seed fold means, then mean and population std over seeds."""
    per_seed = []
    for seed in seeds:
        rs = [r for r in results if r.seed == seed]
        per_seed.append({"seed": seed,
                         "wa": float(np.mean([r.test.wa for r in rs])),
                         "ua": float(np.mean([r.test.ua for r in rs]))})
    wa = np.asarray([s["wa"] for s in per_seed])
    ua = np.asarray([s["ua"] for s in per_seed])
    return {
        "per_seed": per_seed,
        "wa_mean": float(wa.mean()), "wa_std": float(wa.std()),
        "ua_mean": float(ua.mean()), "ua_std": float(ua.std()),
        "wa": format_mean_std(wa.mean(), wa.std()),
        "ua": format_mean_std(ua.mean(), ua.std()),
    }


def write_results(out_dir, run_cfg: RunConfig, results, summary):
    """results.json plus a plain-text table row for the run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "run_id": run_cfg.run_id(),
        "config": run_cfg.to_dict(),
        "labels": list(LABELS),
        "folds": [{
            "seed": r.seed, "fold": r.fold,
            "wa": r.test.wa, "ua": r.test.ua,
            "per_class_recall": r.test.per_class_recall,
            "confusion": r.test.confusion.tolist(),
            "dev_history": r.dev_history,
            "best_epoch": r.best_epoch,
            "epochs_run": r.epochs_run,
        } for r in results],
        "summary": summary,
    }
    (out / "results.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    m = run_cfg.model
    row_name = f"{run_cfg.harness.granularity} ({m.layers_text}|{m.layers_cross}|{m.layers_fusion})"
    write_table(out / "table.txt", [(row_name, summary["wa"], summary["ua"])])
    return out / "results.json"


def write_table(path, rows):
    """Aligned model/WA/UA rows, stable order as given."""
    name_w = max(len("model"), *(len(r[0]) for r in rows))
    lines = [f"{'model'.ljust(name_w)}  {'WA'.ljust(13)}  UA"]
    for name, wa, ua in rows:
        lines.append(f"{name.ljust(name_w)}  {wa.ljust(13)}  {ua}")
    Path(path).write_text("\n".join(lines) + "\n")
