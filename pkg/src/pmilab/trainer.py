"""Training orchestration: rounds, epochs, batches, model selection.

A training run walks ``config.rounds`` rounds; each round refreshes the
negatives per the sampling policy (advancing through the pool when one is
configured) and then runs its share of the epochs. Every epoch shuffles the
positives into batches, pairs each positive with its round negatives,
applies the chosen objective, and steps AdamW with the dimension-scaled
learning rate. After each epoch the validation metric is computed
(MSE-to-oracle when the validation pairs carry analytic targets, global
ROC-AUC otherwise) and the best parameters are tracked; the returned state
carries that best snapshot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DataError,
    DivergenceError,
    EmbeddedPair,
    NEGATIVE,
    POSITIVE,
    PairSample,
    TrainConfig,
    child_rng,
    stack_vectors,
)
from . import dataio
from .ingest import Dialogue, EmbeddingClient, render_prompt
from .metrics import EvalReport, mse, pearson, roc_auc, spearman
from .objectives import ScoreBatch, kde_fit, kde_score_batch, objective_loss
from .sampling import (
    NegativePolicy,
    build_pool,
    dialogue_negatives,
    mismatch_negatives,
    pool_round_negatives,
)
from .scorer import (
    AdamState,
    ScorerParams,
    adamw_step,
    add_grads,
    backward_batch,
    forward_batch,
    init_params,
    learning_rate,
    pmis_score_batch,
)
from .synthetic import JointSpec, SyntheticEmbedConfig, SyntheticEmbedder

LOSS_GUARD = 1e6


class SyntheticNegativeSource:
    """Round negatives for index-pair data: mismatch indices, then embed."""

    def __init__(
        self,
        spec: JointSpec,
        embed_cfg: SyntheticEmbedConfig,
        positives: list[EmbeddedPair],
        policy: NegativePolicy,
        pool_rng: np.random.Generator | None = None,
    ):
        if any(p.ctx_index is None for p in positives):
            raise DataError("synthetic negatives need prototype indices on positives")
        self.embedder = SyntheticEmbedder(spec, embed_cfg)
        self.policy = policy
        self._samples = [
            PairSample(
                context=f"ctx:{p.ctx_index}",
                response=f"resp:{p.resp_index}",
                ctx_index=p.ctx_index,
                resp_index=p.resp_index,
            )
            for p in positives
        ]
        self._pool = None
        if policy.pool_size:
            if pool_rng is None:
                raise DataError("a pooled policy needs a pool rng")
            self._pool = build_pool(self._samples, policy.pool_size, pool_rng)

    @property
    def per_round(self) -> int:
        return self.policy.negatives_per_round

    def negatives_for_round(
        self, round_idx: int, rng: np.random.Generator
    ) -> np.ndarray:
        if self._pool is not None:
            samples = pool_round_negatives(
                self._samples, self._pool, round_idx, self.policy.per_round or self.policy.per_pos
            )
        else:
            samples = mismatch_negatives(self._samples, self.policy, rng)
        vecs = np.stack(
            [self.embedder.vector(s.ctx_index, s.resp_index, rng) for s in samples]
        )
        return vecs.reshape(len(self._samples), self.per_round, -1)


class CorpusNegativeSource:
    """Round negatives for text data: sample pairs, render prompts, embed."""

    def __init__(
        self,
        positives: list[PairSample],
        dialogues: dict[str, Dialogue],
        policy: NegativePolicy,
        client: EmbeddingClient,
        pool_rng: np.random.Generator | None = None,
    ):
        self.positives = positives
        self.dialogues = dialogues
        self.policy = policy
        self.client = client
        self._pool = None
        if policy.pool_size:
            if pool_rng is None:
                raise DataError("a pooled policy needs a pool rng")
            self._pool = build_pool(positives, policy.pool_size, pool_rng)

    @property
    def per_round(self) -> int:
        return self.policy.negatives_per_round

    def sample_round(self, round_idx: int, rng: np.random.Generator) -> list[PairSample]:
        if self._pool is not None:
            return pool_round_negatives(
                self.positives, self._pool, round_idx, self.policy.per_round or self.policy.per_pos
            )
        if self.policy.in_dialogue_count > 0 or self.policy.in_dialogue_prob > 0:
            return dialogue_negatives(self.dialogues, self.positives, self.policy, rng)
        return mismatch_negatives(self.positives, self.policy, rng)

    def negatives_for_round(
        self, round_idx: int, rng: np.random.Generator
    ) -> np.ndarray:
        samples = self.sample_round(round_idx, rng)
        prompts = [render_prompt(s.context, s.response) for s in samples]
        vecs = self.client.embed(prompts)
        return vecs.reshape(len(self.positives), self.per_round, -1)


@dataclass
class TrainState:
    """Everything a finished (or aborted) run knows about itself."""

    params: ScorerParams
    adam: AdamState
    epoch: int
    round: int
    best_val_metric: float
    best_params: ScorerParams
    best_epoch: int
    metric_name: str
    history: list[dict] = field(default_factory=list)


def _epochs_per_round(epochs: int, rounds: int) -> list[int]:
    base, extra = divmod(epochs, rounds)
    return [base + (1 if r < extra else 0) for r in range(rounds)]


def _val_metric_fn(val_set: list[EmbeddedPair]):
    """Pick the validation metric: MSE-to-oracle if targets exist, else AUC."""
    if not val_set:
        return None, None, True
    positives = [p for p in val_set if p.label == POSITIVE]
    if positives and all(p.target_pmi is not None for p in positives):
        X = stack_vectors(positives)
        targets = np.array([p.target_pmi for p in positives])

        def metric(params):
            return mse(pmis_score_batch(params, X), targets)

        return metric, "val_mse", True  # lower is better
    labels = {p.label for p in val_set}
    if labels == {POSITIVE, NEGATIVE}:
        X = stack_vectors(val_set)
        is_pos = np.array([p.label == POSITIVE for p in val_set])

        def metric(params):
            scores = pmis_score_batch(params, X)
            return roc_auc(scores[is_pos], scores[~is_pos])

        return metric, "val_auc", False  # higher is better
    raise DataError(
        "validation set needs analytic targets or both labels; "
        "got neither (field: target_pmi / label)"
    )


def train(
    train_pos: list[EmbeddedPair],
    val_set: list[EmbeddedPair],
    config: TrainConfig,
    neg_source,
    rng: np.random.Generator | None = None,
) -> TrainState:
    """Run one full training; returns the state with best_params selected.

    Raises DivergenceError (with the best state so far attached) when the
    loss leaves [-1e6, 1e6] or stops being finite.
    """
    if not train_pos:
        raise DataError("no training positives")
    pos_X = stack_vectors(train_pos)
    n_pos, d = pos_X.shape
    if rng is None:
        rng = child_rng(config.seed, "train")

    params = init_params(d, child_rng(config.seed, "init"), cap=config.softcap)
    adam = AdamState.zeros(params)
    lr = learning_rate(d, config.base_lr_numerator)
    metric_fn, metric_name, lower_better = _val_metric_fn(val_set)
    if metric_fn is None:
        metric_name, lower_better = "train_loss", True

    state = TrainState(
        params=params,
        adam=adam,
        epoch=0,
        round=0,
        best_val_metric=math.inf if lower_better else -math.inf,
        best_params=params.copy(),
        best_epoch=0,
        metric_name=metric_name,
    )
    if config.epochs == 0:
        return state

    def better(candidate, incumbent):
        return candidate < incumbent if lower_better else candidate > incumbent

    global_epoch = 0
    epochs_since_best = 0
    for round_idx, round_epochs in enumerate(_epochs_per_round(config.epochs, config.rounds)):
        state.round = round_idx
        if round_epochs == 0:
            continue
        negs = neg_source.negatives_for_round(round_idx, rng)
        if negs.shape[0] != n_pos or negs.shape[2] != d:
            raise DataError(
                f"negative block has shape {negs.shape}, expected ({n_pos}, k, {d})"
            )
        k = negs.shape[1]
        for _ in range(round_epochs):
            global_epoch += 1
            order = rng.permutation(n_pos)
            batch_losses = []
            for start in range(0, n_pos, config.batch_positives):
                idx = order[start : start + config.batch_positives]
                Xp = pos_X[idx]
                Xn = negs[idx].reshape(-1, d)
                pos_scores, tape_p = forward_batch(params, Xp)
                neg_scores, tape_n = forward_batch(params, Xn)
                groups = np.arange(idx.size * k).reshape(idx.size, k)
                batch = ScoreBatch(pos_scores, neg_scores, groups=groups)
                loss, dpos, dneg = objective_loss(config.objective, batch)
                if not math.isfinite(loss) or abs(loss) > LOSS_GUARD:
                    raise DivergenceError(
                        f"diverged at epoch {global_epoch}: loss={loss}", state=state
                    )
                try:
                    grads = add_grads(
                        backward_batch(params, tape_p, dpos),
                        backward_batch(params, tape_n, dneg),
                    )
                    adamw_step(params, grads, adam, lr)
                except DivergenceError as exc:
                    exc.state = state
                    raise
                batch_losses.append(loss)
            train_loss = float(np.mean(batch_losses))
            val_value = metric_fn(params) if metric_fn is not None else train_loss
            state.epoch = global_epoch
            state.history.append(
                {
                    "epoch": global_epoch,
                    "round": round_idx,
                    "train_loss": train_loss,
                    "val_metric": float(val_value),
                    "metric": metric_name,
                }
            )
            if better(val_value, state.best_val_metric):
                state.best_val_metric = float(val_value)
                state.best_params = params.copy()
                state.best_epoch = global_epoch
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if config.patience is not None and epochs_since_best > config.patience:
                    return state
    return state


EVALUATABLE = ("mse", "pearson", "spearman", "roc_auc", "spearman_human", "mean_abs_score")


def evaluate(
    params: ScorerParams,
    eval_set: list[EmbeddedPair],
    metrics_requested: tuple[str, ...] = ("mse", "pearson", "spearman"),
    annotations: np.ndarray | None = None,
) -> EvalReport:
    """Score every pair and compute the requested statistics."""
    if not eval_set:
        raise DataError("empty evaluation set")
    for name in metrics_requested:
        if name not in EVALUATABLE:
            raise DataError(f"unknown metric {name!r}")
    X = stack_vectors(eval_set)
    scores = pmis_score_batch(params, X)
    report = EvalReport(n=len(eval_set))

    targets_needed = {"mse", "pearson", "spearman"} & set(metrics_requested)
    if targets_needed:
        with_targets = [
            (s, p.target_pmi)
            for s, p in zip(scores, eval_set)
            if p.target_pmi is not None
        ]
        if not with_targets:
            raise DataError(
                f"metrics {sorted(targets_needed)} need the target_pmi field"
            )
        pred = np.array([s for s, _ in with_targets])
        target = np.array([t for _, t in with_targets])
        if "mse" in metrics_requested:
            report.mse = mse(pred, target)
        if "pearson" in metrics_requested:
            report.pearson = pearson(pred, target)
        if "spearman" in metrics_requested:
            report.spearman = spearman(pred, target)

    if "roc_auc" in metrics_requested:
        is_pos = np.array([p.label == POSITIVE for p in eval_set])
        if is_pos.all() or not is_pos.any():
            raise DataError("roc_auc needs both labels present (field: label)")
        report.roc_auc = roc_auc(scores[is_pos], scores[~is_pos])

    if "spearman_human" in metrics_requested:
        if annotations is None:
            raise DataError("spearman_human needs annotations")
        report.extras["spearman_human"] = spearman(scores, np.asarray(annotations))

    if "mean_abs_score" in metrics_requested:
        report.extras["mean_abs_score"] = float(np.abs(scores).mean())
    return report


# ---------------------------------------------------------------------------
# Dataset bundles: everything needed to train/evaluate from a dataset dir.
# ---------------------------------------------------------------------------


@dataclass
class DatasetBundle:
    meta: dict
    train: list[EmbeddedPair]
    val: list[EmbeddedPair]
    test: list[EmbeddedPair]
    spec: JointSpec | None = None
    embed_cfg: SyntheticEmbedConfig | None = None
    pair_rows: list[dict] | None = None
    dialogues: dict[str, Dialogue] | None = None

    def make_source(self, policy: NegativePolicy, seed: int, client: EmbeddingClient | None = None):
        pool_rng = child_rng(seed, "pool") if policy.pool_size else None
        if self.meta.get("kind") == "synthetic":
            return SyntheticNegativeSource(
                self.spec, self.embed_cfg, self.train, policy, pool_rng=pool_rng
            )
        if client is None:
            raise DataError("corpus datasets need an embedding client for negatives")
        positives = _rows_to_samples(self.pair_rows, "train")
        return CorpusNegativeSource(
            positives, self.dialogues or {}, policy, client, pool_rng=pool_rng
        )

    def corpus_val_negatives(
        self, policy: NegativePolicy, seed: int, client: EmbeddingClient
    ) -> list[EmbeddedPair]:
        """One fixed negative draw for the validation split (AUC selection)."""
        positives = _rows_to_samples(self.pair_rows, "val")
        source = CorpusNegativeSource(
            positives, self.dialogues or {}, policy, client,
            pool_rng=child_rng(seed, "val-pool") if policy.pool_size else None,
        )
        block = source.negatives_for_round(0, child_rng(seed, "val-negatives"))
        out = []
        for row_block, sample in zip(block, positives):
            for vec in row_block:
                out.append(
                    EmbeddedPair(vector=vec, label=NEGATIVE, group_id=sample.dialogue_id)
                )
        return out


def _rows_to_samples(rows: list[dict] | None, split: str) -> list[PairSample]:
    if rows is None:
        raise DataError("dataset has no pair rows")
    out = []
    for row in rows:
        if row.get("split") != split:
            continue
        out.append(
            PairSample(
                context=row["context"],
                response=row["response"],
                dialogue_id=row.get("dialogue_id"),
            )
        )
    if not out:
        raise DataError(f"no pairs in split {split!r}")
    return out


def rebuild_joint_spec(meta: dict) -> JointSpec:
    from . import synthetic as syn

    family = meta["family"]
    if family == "diagonal":
        return syn.make_diagonal(meta["K"], meta["eps"])
    if family == "block":
        return syn.make_block(meta["K"], meta["n_blocks"], meta["eps"])
    if family == "independent":
        alpha = meta.get("dirichlet_alpha")
        rng = child_rng(meta["seed"], "marginals") if alpha else None
        return syn.make_independent(meta["K"], dirichlet_alpha=alpha, rng=rng)
    raise DataError(f"unknown family {family!r} in dataset meta")


def load_bundle(dataset_dir: str | Path) -> DatasetBundle:
    dataset_dir = Path(dataset_dir)
    meta = dataio.dataset_meta(dataset_dir)
    bundle = DatasetBundle(
        meta=meta,
        train=dataio.read_split(dataset_dir, "train"),
        val=dataio.read_split(dataset_dir, "val"),
        test=dataio.read_split(dataset_dir, "test"),
    )
    if meta.get("kind") == "synthetic":
        bundle.spec = rebuild_joint_spec(meta)
        bundle.embed_cfg = SyntheticEmbedConfig.from_dict(meta["embed"])
    else:
        bundle.pair_rows = dataio.read_jsonl(dataset_dir / "pairs.jsonl")
        dialogue_rows = dataio.read_jsonl(dataset_dir / "dialogues.jsonl")
        bundle.dialogues = {
            row["id"]: Dialogue(id=row["id"], turns=row["turns"]) for row in dialogue_rows
        }
    return bundle


# ---------------------------------------------------------------------------
# Method comparison across datasets, objectives, and seeds.
# ---------------------------------------------------------------------------

COMPARE_OBJECTIVES = ("pmiscore", "mine", "infonce", "kde")


def _kde_report(
    bundle: DatasetBundle, policy: NegativePolicy, seed: int, metrics_requested
) -> EvalReport:
    source = bundle.make_source(policy, seed)
    negs = source.negatives_for_round(0, child_rng(seed, "kde-negatives"))
    model = kde_fit(
        stack_vectors(bundle.train),
        negs.reshape(-1, negs.shape[2]),
        use_pca=True,
    )
    test = [p for p in bundle.test if p.target_pmi is not None]
    scores = kde_score_batch(model, stack_vectors(test))
    targets = np.array([p.target_pmi for p in test])
    return EvalReport(
        n=len(test),
        mse=mse(scores, targets),
        pearson=pearson(scores, targets),
        spearman=spearman(scores, targets),
    )


def compare(
    dataset_dirs: list[str | Path],
    objectives: list[str],
    seeds: list[int],
    base_config: TrainConfig | None = None,
    policy: NegativePolicy | None = None,
    metrics_requested: tuple[str, ...] = ("mse", "pearson", "spearman"),
) -> dict:
    """Run every (dataset, objective, seed) cell and aggregate mean/std.

    A failed cell is recorded as missing rather than aborting the sweep. The
    best objective per (dataset, metric) is flagged the way the result
    tables mark their winners (max correlations, min MSE).
    """
    if not objectives or not seeds:
        raise DataError("compare needs at least one objective and one seed")
    base_config = base_config or TrainConfig()
    policy = policy or NegativePolicy.flat(per_pos=base_config.neg_per_pos)
    results: dict = {"datasets": {}, "objectives": list(objectives), "seeds": list(seeds)}
    for dataset_dir in dataset_dirs:
        dataset_dir = Path(dataset_dir)
        bundle = load_bundle(dataset_dir)
        name = bundle.meta.get("name", dataset_dir.name)
        per_obj: dict = {}
        for objective in objectives:
            reports = []
            errors = []
            for seed in seeds:
                try:
                    if objective == "kde":
                        reports.append(
                            _kde_report(bundle, policy, seed, metrics_requested)
                        )
                        continue
                    cfg_dict = base_config.to_dict()
                    cfg_dict.update({"objective": objective, "seed": seed})
                    config = TrainConfig.from_dict(cfg_dict)
                    source = bundle.make_source(policy, seed)
                    state = train(bundle.train, bundle.val, config, source)
                    reports.append(
                        evaluate(state.best_params, bundle.test, metrics_requested)
                    )
                except (DataError, DivergenceError) as exc:
                    errors.append(f"seed {seed}: {exc}")
            cell: dict = {"completed": len(reports), "failed": len(errors)}
            if errors:
                cell["errors"] = errors
            if reports:
                from .metrics import aggregate_reports

                cell.update(aggregate_reports(reports))
            per_obj[objective] = cell
        best: dict = {}
        for metric in metrics_requested:
            key = f"{metric}_mean"
            have = {o: c[key] for o, c in per_obj.items() if key in c}
            if have:
                pick = min if metric == "mse" else max
                best[metric] = pick(have, key=have.get)
        results["datasets"][name] = {"objectives": per_obj, "best": best}
    return results


def comparison_rows(results: dict) -> list[dict]:
    """Flatten a compare() result into printable table rows."""
    rows = []
    for name, data in results["datasets"].items():
        for objective, cell in data["objectives"].items():
            row = {"dataset": name, "objective": objective}
            for key, val in cell.items():
                if key.endswith("_mean") or key.endswith("_std"):
                    row[key] = val
            row["completed"] = cell.get("completed", 0)
            marks = [m for m, o in data["best"].items() if o == objective]
            row["best_for"] = ",".join(sorted(marks)) if marks else ""
            rows.append(row)
    return rows
