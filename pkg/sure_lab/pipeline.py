"""Two-phase training, the uncertainty baselines, the ablation matrix and the run directory.

Phase 1 trains one reconstructor per modality against the frozen backbone's
latents. Phase 2 freezes the reconstructors and fine-tunes the classifier head
with the downstream loss plus an uncertainty loss on σ̃²_Y = σ̃²_input + σ̃²_ω.
"""

import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

import anyio
import numpy as np
import pandas as pd

from .backbone import (
    Backbone,
    ClassifierHead,
    build_backbone,
    build_head,
    fuse,
    head_forward,
    prediction_fn,
    pretrain,
    project,
)
from .configuration import Configuration, Method, RunConfig, load_run_config
from .errors import ConfigError, ContractError
from .estimators import EnsembleEstimator, McDropoutEstimator, PointEstimator, SureEstimator
from .estimators_interface import UncertaintyEstimator
from .evaluation import (
    CalibrationStats,
    MetricsReport,
    ScenarioResult,
    build_report,
    calibration_stats,
    records_frame,
    write_deferral_csv,
    write_metrics_json,
)
from .losses import nll_loss_from_errors, pcc_loss, pearson, per_sample_error, per_sample_error_tensor
from .nn import AdamOptimizer, child_seeds, load_checkpoint, restore_parameters, save_checkpoint, train_step
from .propagation import UncertaintyRecord, propagate, sensitivity_drift
from .reconstruction import (
    Completion,
    LossKind,
    RecTerm,
    Reconstructor,
    build_reconstructors,
    complete_latents,
    pooled_rec_loss,
    reconstruct_graph,
)
from .synth_data import ModalBatch, Splits, apply_masks, generate, missing_scenarios, scenario_name
from .tensor import Graph, Parameter
from . import utils

logger = logging.getLogger(__name__)

CompletionRule = typing.Literal["reconstruct", "zero", "drop"]

BACKBONE_CHECKPOINT = "backbone.ckpt.json"
RECONSTRUCTORS_CHECKPOINT = "reconstructors.ckpt.json"
HEADS_CHECKPOINT = "heads.ckpt.json"


@dataclass(frozen=True)
class MethodProfile:
    method: Method
    rec_loss: LossKind
    lam: float
    head_loss: LossKind | None
    lam_out: float
    propagate: bool
    train_completion: CompletionRule
    eval_completion: CompletionRule
    n_heads: int = 1
    mc_passes: int = 0
    dropout_rate: float = 0.0
    pretrained: bool = True
    emits_uncertainty: bool = True

    @property
    def uses_reconstruction(self) -> bool:
        return "reconstruct" in (self.train_completion, self.eval_completion)

    @property
    def reports_reconstruction_uncertainty(self) -> bool:
        return self.uses_reconstruction and self.emits_uncertainty and self.lam > 0.0


def method_profile(config: RunConfig) -> MethodProfile:
    method = config.method
    sure = dict(
        method=method,
        rec_loss="pcc",
        lam=config.lam,
        head_loss="pcc",
        lam_out=config.lam_out,
        propagate=True,
        train_completion="reconstruct",
        eval_completion="reconstruct",
    )
    # SURE*: MSE reconstruction, no uncertainty heads
    deterministic = dict(sure, lam=0.0, head_loss=None, lam_out=0.0, propagate=False)
    match method:
        case Method.SURE:
            return MethodProfile(**sure)
        case Method.SURE_NLL:
            return MethodProfile(**dict(sure, rec_loss="nll", head_loss="nll"))
        case Method.SURE_MCDROPOUT:
            return MethodProfile(**deterministic, mc_passes=config.mc_passes, dropout_rate=config.dropout_rate)
        case Method.SURE_ENSEMBLE:
            return MethodProfile(**deterministic, n_heads=config.ensemble_members)
        case Method.ABLATION_1A:
            return MethodProfile(**dict(sure, propagate=False, train_completion="drop", eval_completion="zero"))
        case Method.ABLATION_1B:
            return MethodProfile(**dict(sure, propagate=False, train_completion="zero", eval_completion="zero"))
        case Method.ABLATION_2A:
            return MethodProfile(**deterministic, emits_uncertainty=False)
        case Method.ABLATION_2B:
            return MethodProfile(**dict(sure, lam=0.0, propagate=False))
        case Method.ABLATION_3:
            return MethodProfile(**sure, pretrained=False)
    raise ConfigError(f"unknown method tag: {method}")


class RunSeeds(typing.NamedTuple):
    backbone: int
    reference: int
    pretrain: int
    mask: int
    holdout: int
    reconstructors: int
    phase1: int
    heads: int
    phase2: int
    evaluation: int


def run_seeds(seed: int) -> RunSeeds:
    return RunSeeds(*child_seeds(seed, len(RunSeeds._fields)))


@dataclass
class PreparedData:
    splits: Splits
    finetune: ModalBatch
    train_rows: np.ndarray
    holdout_rows: np.ndarray

    @property
    def finetune_train(self) -> ModalBatch:
        return self.finetune.subset(self.train_rows)


def prepare_data(config: RunConfig, seeds: RunSeeds) -> PreparedData:
    """Generate the splits, mask the fine-tune split once and carve out the held-out convergence slice."""
    splits = generate(config.dataset)
    finetune = apply_masks(splits.finetune, config.mask_fraction, seeds.mask)
    order = np.random.default_rng(seeds.holdout).permutation(finetune.size)
    n_holdout = min(max(2, int(np.floor(config.holdout_fraction * finetune.size + 0.5))), finetune.size - 2)
    return PreparedData(splits, finetune, np.sort(order[n_holdout:]), np.sort(order[:n_holdout]))


@dataclass
class TrainedModel:
    config: RunConfig
    profile: MethodProfile
    backbone: Backbone
    reference: ClassifierHead
    reconstructors: list[Reconstructor]
    heads: list[ClassifierHead]
    eval_seed: int

    def checkpoint_groups(self) -> dict[str, list[Parameter]]:
        groups = {
            BACKBONE_CHECKPOINT: self.backbone.parameters() + self.reference.parameters(),
            HEADS_CHECKPOINT: [p for head in self.heads for p in head.parameters()],
        }
        if self.reconstructors:
            groups[RECONSTRUCTORS_CHECKPOINT] = [p for rec in self.reconstructors for p in rec.parameters()]
        return groups

    def estimator(self) -> UncertaintyEstimator:
        profile, task = self.profile, self.config.dataset.task
        if profile.mc_passes > 0:
            return McDropoutEstimator(self.backbone, self.heads[0], task, profile.mc_passes, self.eval_seed)
        if profile.method == Method.SURE_ENSEMBLE:
            return EnsembleEstimator(self.backbone, self.heads, task)
        if not profile.emits_uncertainty:
            return PointEstimator(self.backbone, self.heads[0])
        return SureEstimator(self.backbone, self.heads[0], prediction_fn(self.backbone, self.reference), profile.propagate)


def build_model(config: RunConfig, profile: MethodProfile, seeds: RunSeeds) -> TrainedModel:
    """Untrained architecture for a run; loading a run rebuilds this and restores checkpoints into it."""
    ds = config.dataset
    backbone = build_backbone(ds.modality_dims, config.latent_dim, config.fusion_dim, seeds.backbone)
    reference = build_head(config.fusion_dim, config.head_hidden, ds.output_dim, seeds.reference, name="reference")
    reconstructors = (
        build_reconstructors(ds.n_modalities, config.latent_dim, seeds.reconstructors) if profile.uses_reconstruction else []
    )
    heads = [
        build_head(config.fusion_dim, config.head_hidden, ds.output_dim, s, profile.dropout_rate, name=f"head{k}")
        for k, s in enumerate(child_seeds(seeds.heads, profile.n_heads))
    ]
    return TrainedModel(config, profile, backbone, reference, reconstructors, heads, seeds.evaluation)


def pretrain_backbone(config: RunConfig, model: TrainedModel, data: PreparedData, seeds: RunSeeds) -> list[float]:
    if model.profile.pretrained:
        batch = data.splits.train
    else:
        # from scratch: only complete fine-tune training rows can feed the full backbone
        train = data.finetune_train
        rows = train.complete_rows()
        if rows.size < 2:
            raise ContractError(f"only {rows.size} complete fine-tune rows; cannot train the backbone from scratch")
        batch = train.subset(rows)
        logger.info("Training backbone from scratch on %d complete fine-tune rows", rows.size)
    history = pretrain(
        model.backbone, model.reference, batch, config.pretrain_epochs, config.pretrain_lr, config.batch_size, seeds.pretrain
    )
    model.reference.freeze()
    return history


@dataclass
class Phase1Result:
    history: list[float]
    holdout_history: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def _pair_terms(
    graph: Graph,
    reconstructors: typing.Sequence[Reconstructor],
    latents: typing.Sequence[np.ndarray],
    presence: np.ndarray,
    pairs: typing.Sequence[tuple[int, int]],
    rows: np.ndarray,
) -> list[RecTerm]:
    terms = []
    for i, j in pairs:
        both = rows[presence[rows, i] & presence[rows, j]]
        if both.size == 0:
            continue
        z_hat, var = reconstruct_graph(reconstructors[i], graph, graph.constant(latents[j][both]), j)
        terms.append(RecTerm(z_hat, latents[i][both], var))
    return terms


def train_phase1(
    config: RunConfig,
    data: ModalBatch,
    backbone: Backbone,
    reconstructors: typing.Sequence[Reconstructor],
    profile: MethodProfile | None = None,
    seed: int = 0,
    holdout: ModalBatch | None = None,
) -> Phase1Result:
    """Train every reconstructor on the ordered (target, source) pairs co-present in `data`, then freeze them.

    Each mini-batch takes one loss over all pairs, so the variance heads share a single Pearson term.
    With a `holdout` batch the epoch with the lowest held-out loss is kept.
    """
    if not backbone.frozen:
        raise ContractError("phase 1 needs a frozen backbone")
    profile = profile or method_profile(config)
    latents = project(backbone, data)
    presence = data.presence
    pairs = []
    for i in range(data.n_modalities):
        for j in range(data.n_modalities):
            if i == j:
                continue
            if not np.any(presence[:, i] & presence[:, j]):
                logger.warning("No row has modalities %d and %d both present; skipping pair %d <- %d", i, j, i, j)
                continue
            pairs.append((i, j))
    logger.info("Phase 1: training %d reconstruction pairs", len(pairs))

    held_latents = project(backbone, holdout) if holdout is not None else None
    held_rows = np.arange(holdout.size) if holdout is not None else None
    params = [p for rec in reconstructors for p in rec.parameters()]
    optimizer = AdamOptimizer(lr=config.phase1_lr)
    rng = np.random.default_rng(seed)
    result = Phase1Result([])
    best, best_values = np.inf, None
    for epoch in range(config.phase1_epochs if pairs else 0):
        order = rng.permutation(data.size)
        total, steps, degenerate = 0.0, 0, 0
        for start in range(0, data.size, config.batch_size):
            rows = order[start : start + config.batch_size]
            graph = Graph()
            terms = _pair_terms(graph, reconstructors, latents, presence, pairs, rows)
            if sum(t.z_true.shape[0] for t in terms) < 2:
                continue
            value = pooled_rec_loss(graph, terms, profile.lam, profile.rec_loss)
            degenerate += value.degenerate
            total += train_step(graph, value.loss, optimizer)
            steps += 1
        if degenerate:
            logger.warning("Phase 1 epoch %d: %d degenerate Pearson batches", epoch, degenerate)
        result.history.append(total / max(steps, 1))
        logger.debug("phase1 epoch %d loss %.6f", epoch, result.history[-1])

        if held_latents is None:
            continue
        graph = Graph()
        terms = _pair_terms(graph, reconstructors, held_latents, holdout.presence, pairs, held_rows)
        if sum(t.z_true.shape[0] for t in terms) < 2:
            continue
        loss = float(pooled_rec_loss(graph, terms, profile.lam, profile.rec_loss).loss.value)
        result.holdout_history.append(loss)
        if loss < best:
            best, best_values = loss, [p.value.copy() for p in params]
            result.best_epoch = epoch
    if best_values is not None:
        for p, v in zip(params, best_values):
            p.value = v
        logger.info("Phase 1: keeping epoch %d (held-out loss %.4f)", result.best_epoch, best)
    if result.history:
        logger.info("Phase 1 loss %.4f -> %.4f", result.history[0], result.history[-1])
    for rec in reconstructors:
        rec.freeze()
    return result


def complete(
    rule: CompletionRule,
    reconstructors: typing.Sequence[Reconstructor],
    latents: typing.Sequence[np.ndarray],
    presence: np.ndarray,
) -> Completion:
    """Fill absent latents by reconstruction, or leave the zero placeholders ("zero" and "drop")."""
    if rule == "reconstruct":
        if not reconstructors:
            raise ContractError("reconstruction requested but no reconstructors were built")
        return complete_latents(reconstructors, latents, presence)
    return Completion([z.copy() for z in latents], {})


def fused_features(backbone: Backbone, latents: typing.Sequence[np.ndarray]) -> np.ndarray:
    graph = Graph()
    return fuse(backbone, graph, [graph.constant(z) for z in latents]).value


@dataclass
class Phase2Result:
    convergence: list[float]
    history: list[float]
    n_rows: int
    member_histories: list[list[float]] = field(default_factory=list)
    sensitivity_drift: float | None = None


def _fit_head(
    config: RunConfig,
    profile: MethodProfile,
    head: ClassifierHead,
    features: np.ndarray,
    sigma2_input: np.ndarray,
    labels: np.ndarray,
    train_rows: np.ndarray,
    holdout_rows: np.ndarray,
    seed: int,
) -> tuple[list[float], list[float]]:
    task = config.dataset.task
    optimizer = AdamOptimizer(lr=config.phase2_lr)
    rng = np.random.default_rng(seed)
    stochastic = profile.dropout_rate > 0.0
    uncertainty_loss = profile.head_loss is not None and profile.lam_out > 0.0
    convergence, history = [], []
    for epoch in range(config.phase2_epochs):
        order = rng.permutation(train_rows)
        total, degenerate = 0.0, 0
        for start in range(0, order.size, config.batch_size):
            rows = order[start : start + config.batch_size]
            graph = Graph()
            y, sigma2_omega = head_forward(head, graph, graph.constant(features[rows]), stochastic, rng)
            err = per_sample_error_tensor(graph, task, y, labels[rows])
            loss = graph.mean(err)
            if uncertainty_loss and rows.size >= 2:
                sigma2_total = graph.add(graph.constant(sigma2_input[rows]), sigma2_omega)
                if profile.head_loss == "nll":
                    unc = nll_loss_from_errors(graph, graph.constant(err.value), sigma2_total)
                else:
                    pcc = pcc_loss(graph, sigma2_total, err.value)
                    degenerate += pcc.degenerate
                    unc = pcc.loss
                loss = graph.add(loss, graph.scale(unc, profile.lam_out))
            total += train_step(graph, loss, optimizer) * rows.size
        if degenerate:
            logger.warning("Phase 2 epoch %d: %d degenerate Pearson batches", epoch, degenerate)
        history.append(total / order.size)

        graph = Graph()
        y, sigma2_omega = head_forward(head, graph, graph.constant(features[holdout_rows]))
        err2 = per_sample_error(task, y.value, labels[holdout_rows])
        convergence.append(pearson(sigma2_input[holdout_rows] + sigma2_omega.value, err2).value)
        logger.debug("phase2 epoch %d loss %.6f pearson %.4f", epoch, history[-1], convergence[-1])
    return convergence, history


def train_phase2(
    config: RunConfig,
    data: ModalBatch,
    model: TrainedModel,
    train_rows: np.ndarray,
    holdout_rows: np.ndarray,
    seed: int = 0,
) -> Phase2Result:
    """Fine-tune every head of `model` on the completed fine-tune rows; returns the held-out convergence log."""
    profile = model.profile
    if not model.backbone.frozen:
        raise ContractError("phase 2 needs a frozen backbone")
    if any(not p.frozen for rec in model.reconstructors for p in rec.parameters()):
        raise ContractError("phase 2 needs frozen reconstructors")
    latents = project(model.backbone, data)
    completion = complete(profile.train_completion, model.reconstructors, latents, data.presence)
    if profile.train_completion == "drop":
        full = data.presence.all(axis=1)
        train_rows, holdout_rows = train_rows[full[train_rows]], holdout_rows[full[holdout_rows]]
        logger.info("Phase 2 keeps %d complete training rows", train_rows.size)
    if train_rows.size < 2 or holdout_rows.size < 2:
        raise ContractError(f"phase 2 needs at least 2 training and 2 held-out rows, got {train_rows.size} and {holdout_rows.size}")

    # frozen path: σ̃²_input and fused features are fixed for the whole phase
    if profile.propagate:
        reference = prediction_fn(model.backbone, model.reference)
        sigma2_input = propagate(reference, completion.latents, completion.rec_var.keys(), completion.rec_var).sigma2_input
    else:
        sigma2_input = np.zeros(data.size)
    features = fused_features(model.backbone, completion.latents)

    if len(model.heads) == 1:
        # a single head starts from the pretrained prediction head
        for dst, src in zip(model.heads[0].parameters(), model.reference.parameters()):
            dst.value = src.value.copy()

    result = Phase2Result([], [], int(train_rows.size))
    for k, (head, head_seed) in enumerate(zip(model.heads, child_seeds(seed, len(model.heads)))):
        convergence, history = _fit_head(
            config, profile, head, features, sigma2_input, data.labels, train_rows, holdout_rows, head_seed
        )
        head.freeze()
        result.member_histories.append(history)
        if k == 0:
            result.convergence, result.history = convergence, history
    if profile.propagate and completion.rec_var:
        held = [z[holdout_rows] for z in completion.latents]
        trained = prediction_fn(model.backbone, model.heads[0])
        result.sensitivity_drift = sensitivity_drift(reference, trained, held, completion.rec_var.keys())
        logger.info("Phase 2 sensitivity drift from the reference head: %.4f", result.sensitivity_drift)
    logger.info(
        "Phase 2 trained %d head(s); held-out pearson %.4f -> %.4f",
        len(model.heads),
        result.convergence[0],
        result.convergence[-1],
    )
    return result


def evaluate_batch(
    model: TrainedModel,
    batch: ModalBatch,
    true_latents: typing.Sequence[np.ndarray] | None = None,
    missing: tuple[int, ...] = (),
) -> ScenarioResult:
    profile = model.profile
    latents = project(model.backbone, batch)
    completion = complete(profile.eval_completion, model.reconstructors, latents, batch.presence)
    estimate = model.estimator().estimate(completion)
    error = per_sample_error(batch.task, estimate["predictions"], batch.labels)
    rec_error = {}
    if true_latents is not None:
        for i in range(batch.n_modalities):
            if not batch.presence[:, i].all():
                rec_error[i] = np.mean((completion.latents[i] - true_latents[i]) ** 2, axis=1)
    rec_var = dict(completion.rec_var) if profile.reports_reconstruction_uncertainty else {}
    record = UncertaintyRecord(
        error=error,
        sigma2_input=estimate["sigma2_input"],
        sigma2_omega=estimate["sigma2_omega"],
        sigma2_total=estimate["sigma2_total"],
        rec_var=rec_var,
        rec_error=rec_error,
        sensitivities=estimate["sensitivities"],
    )
    return ScenarioResult(scenario_name(missing), tuple(missing), batch.task, estimate["predictions"], batch.labels, record)


def evaluate(
    model: TrainedModel, test: ModalBatch, scenarios: typing.Iterable[tuple[int, ...]] | None = None
) -> list[ScenarioResult]:
    """One result per missing-modality scenario, all from the same trained model."""
    if scenarios is None:
        scenarios = missing_scenarios(test.n_modalities)
    true_latents = project(model.backbone, test)
    results = []
    for missing in scenarios:
        results.append(evaluate_batch(model, test.with_missing(missing), true_latents, tuple(missing)))
        logger.debug("Evaluated %s", results[-1].name)
    return results


@dataclass
class RunArtifacts:
    config: RunConfig
    model: TrainedModel
    pretrain_history: list[float]
    phase1: Phase1Result
    phase2: Phase2Result
    calibration: CalibrationStats | None
    results: list[ScenarioResult]
    report: MetricsReport

    @property
    def convergence(self) -> list[float]:
        return self.phase2.convergence


def run(
    config: RunConfig,
    settings: Configuration | None = None,
    scenarios: typing.Iterable[tuple[int, ...]] | None = None,
) -> RunArtifacts:
    """Train and evaluate one method on one seed."""
    settings = settings or Configuration()
    profile = method_profile(config)
    seeds = run_seeds(config.seed)
    logger.info("Run %s seed %d", config.method.value, config.seed)
    data = prepare_data(config, seeds)
    model = build_model(config, profile, seeds)

    pretrain_history = pretrain_backbone(config, model, data, seeds)
    finetune_train = data.finetune_train
    phase1 = Phase1Result([])
    if profile.uses_reconstruction:
        holdout = data.finetune.subset(data.holdout_rows)
        phase1 = train_phase1(config, finetune_train, model.backbone, model.reconstructors, profile, seeds.phase1, holdout)
    phase2 = train_phase2(config, data.finetune, model, data.train_rows, data.holdout_rows, seeds.phase2)

    calibration = None
    if profile.emits_uncertainty:
        rows = finetune_train.complete_rows() if profile.train_completion == "drop" else np.arange(finetune_train.size)
        fitted = evaluate_batch(model, finetune_train.subset(rows))
        calibration = calibration_stats(typing.cast(np.ndarray, fitted.record.sigma2_total), fitted.record.error)

    results = evaluate(model, data.splits.test, scenarios)
    report = build_report(results, calibration, settings.deferral_quantiles)
    return RunArtifacts(config, model, pretrain_history, phase1, phase2, calibration, results, report)


def run_baseline(config: RunConfig, settings: Configuration | None = None) -> RunArtifacts:
    if not config.method.is_baseline:
        raise ConfigError(f"{config.method.value} is not a baseline method")
    return run(config, settings)


def run_ablation(config: RunConfig, settings: Configuration | None = None) -> RunArtifacts:
    if not config.method.is_ablation:
        raise ConfigError(f"{config.method.value} is not an ablation")
    return run(config, settings)


def train(config: RunConfig, settings: Configuration | None = None) -> RunArtifacts:
    """Route a method tag to its runner."""
    if config.method.is_baseline:
        return run_baseline(config, settings)
    if config.method.is_ablation:
        return run_ablation(config, settings)
    return run(config, settings)


def compare_convergence(config: RunConfig, seed: int | None = None) -> dict[str, list[float]]:
    """Held-out convergence logs of the PCC and NLL variants on identical data."""
    if seed is not None:
        config = config.with_seed(seed)
    return {
        method.value: run(config.model_copy(update={"method": method}), scenarios=[()]).convergence
        for method in (Method.SURE, Method.SURE_NLL)
    }


def _final(history: typing.Sequence[float]) -> float | None:
    return float(history[-1]) if history else None


def build_summary(artifacts: RunArtifacts) -> dict:
    config = artifacts.config
    scenarios = {}
    for name, metrics in artifacts.report.scenarios.items():
        scenarios[name] = {
            k: v for k, v in metrics.items() if k not in ("deferral", "missing", "reconstruction_uncertainty_corr")
        }
    return {
        "method": config.method.value,
        "seed": config.seed,
        "config_hash": utils.config_hash(config),
        "task": config.dataset.task,
        "n_phase2_rows": artifacts.phase2.n_rows,
        "pretrain_final_loss": _final(artifacts.pretrain_history),
        "phase1_final_loss": _final(artifacts.phase1.history),
        "phase1_best_epoch": artifacts.phase1.best_epoch,
        "phase2_final_loss": _final(artifacts.phase2.history),
        "sensitivity_drift": artifacts.phase2.sensitivity_drift,
        "final_convergence": _final(artifacts.convergence),
        "calibration": artifacts.calibration,
        "pooled": artifacts.report.pooled,
        "scenarios": scenarios,
    }


def write_run(
    artifacts: RunArtifacts, out_dir: str | Path, command: str = "train", settings: Configuration | None = None
) -> Path:
    settings = settings or Configuration()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, config = artifacts.model, artifacts.config
    files = [out / "config.json"]
    files[0].write_text(config.model_dump_json(indent=2))

    for name, params in model.checkpoint_groups().items():
        extra: dict[str, typing.Any] = {"method": config.method.value}
        if name == HEADS_CHECKPOINT:
            extra["calibration"] = artifacts.calibration
        save_checkpoint(out / name, params, extra)
        files.append(out / name)

    convergence = pd.DataFrame({"epoch": np.arange(1, len(artifacts.convergence) + 1), "pearson": artifacts.convergence})
    convergence.to_csv(out / "convergence.csv", index=False, float_format=settings.float_format)
    records_frame(artifacts.results).to_csv(out / "records.csv", index=False, float_format=settings.float_format)
    write_metrics_json(out / "metrics.json", artifacts.report)
    files += [out / "convergence.csv", out / "records.csv", out / "metrics.json"]

    deferral = {n: m["deferral"] for n, m in artifacts.report.scenarios.items() if m.get("deferral")}
    if deferral:
        write_deferral_csv(out / "deferral.csv", deferral, settings.float_format)
        files.append(out / "deferral.csv")

    (out / "summary.json").write_text(json.dumps(build_summary(artifacts), indent=2, sort_keys=True))
    files.append(out / "summary.json")
    utils.write_manifest(out, files, config.seed, command, config)
    logger.info("Wrote run to %s", out)
    return out


class LoadedRun(typing.NamedTuple):
    config: RunConfig
    model: TrainedModel
    calibration: CalibrationStats | None


def load_run(run_dir: str | Path) -> LoadedRun:
    """Rebuild a trained model from a run directory without retraining."""
    run_dir = Path(run_dir)
    manifest = utils.read_manifest(run_dir)
    utils.check_version(str(manifest.get("version", "0")))
    config = load_run_config(run_dir / "config.json")
    model = build_model(config, method_profile(config), run_seeds(config.seed))
    calibration = None
    for name, params in model.checkpoint_groups().items():
        loaded, extra = load_checkpoint(run_dir / name)
        restore_parameters(params, loaded)
        if name == HEADS_CHECKPOINT and extra.get("calibration") is not None:
            calibration = typing.cast(CalibrationStats, utils.assertType(extra["calibration"], dict))
    logger.info("Loaded %s run from %s", config.method.value, run_dir)
    return LoadedRun(config, model, calibration)


def evaluate_run(
    run_dir: str | Path,
    scenarios: typing.Iterable[tuple[int, ...]] | None = None,
    settings: Configuration | None = None,
) -> tuple[RunConfig, list[ScenarioResult], MetricsReport]:
    """Re-evaluate a saved run on regenerated test data; no parameter is touched."""
    settings = settings or Configuration()
    loaded = load_run(run_dir)
    test = generate(loaded.config.dataset).test
    results = evaluate(loaded.model, test, scenarios)
    return loaded.config, results, build_report(results, loaded.calibration, settings.deferral_quantiles)


def train_and_write(config: RunConfig, out_dir: str | Path, command: str, settings: Configuration) -> Path:
    return write_run(train(config, settings), out_dir, command, settings)


async def train_seeds(
    config: RunConfig,
    seeds: typing.Sequence[int] | None,
    out_dir: str | Path,
    command: str = "train",
    settings: Configuration | None = None,
    parallel: bool = False,
) -> list[Path]:
    """One run directory per seed under `out_dir/seed_<s>`; with `parallel` the runs share a worker pool.

    `seeds` of None falls back to the config's own `seeds` list.
    """
    settings = settings or Configuration()
    seeds = list(config.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("no seeds to train: pass seeds or set them in the run config")
    out = Path(out_dir)
    written: dict[int, Path] = {}

    def one(seed: int) -> Path:
        return train_and_write(config.with_seed(seed), out / f"seed_{seed}", command, settings)

    if not parallel:
        for seed in seeds:
            written[seed] = one(seed)
    else:
        limiter = anyio.CapacityLimiter(settings.max_workers)

        async def task(seed: int) -> None:
            written[seed] = await anyio.to_thread.run_sync(one, seed, limiter=limiter)

        async with anyio.create_task_group() as tg:
            for seed in seeds:
                tg.start_soon(task, seed)
    return [written[s] for s in seeds]


def ablation_table(artifacts: dict[str, RunArtifacts]) -> dict[str, dict[str, float | None]]:
    """Per method: downstream metrics and output-uncertainty corr averaged over scenarios."""
    table = {}
    for tag, art in artifacts.items():
        scenarios = art.report.scenarios.values()
        keys = ("acc", "f1", "output_uncertainty_corr") if art.config.dataset.task == "classification" else ("mae", "corr", "output_uncertainty_corr")
        row: dict[str, float | None] = {}
        for key in keys:
            values = [m.get(key) for m in scenarios if m.get(key) is not None]
            row[key] = float(np.mean(values)) if values else None
        row["n_phase2_rows"] = art.phase2.n_rows
        table[tag] = row
    return table


def run_ablation_matrix(config: RunConfig, out_dir: str | Path, settings: Configuration | None = None) -> Path:
    """Full SURE plus every ablation on the same seed, one run directory each, and a comparison table."""
    settings = settings or Configuration()
    out = Path(out_dir)
    artifacts, files = {}, []
    for method in (Method.SURE, *(m for m in Method if m.is_ablation)):
        tagged = config.model_copy(update={"method": method})
        artifacts[method.value] = train(tagged, settings)
        run_dir = write_run(artifacts[method.value], out / method.value, "ablate", settings)
        files.append(run_dir / "summary.json")
    table_path = out / "ablation.json"
    table_path.write_text(json.dumps(ablation_table(artifacts), indent=2, sort_keys=True))
    utils.write_manifest(out, [table_path, *files], config.seed, "ablate", config)
    return table_path


def write_pretrained(config: RunConfig, out_dir: str | Path) -> Path:
    """Pretrain the backbone and its reference head alone and checkpoint them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profile = method_profile(config)
    seeds = run_seeds(config.seed)
    model = build_model(config, profile, seeds)
    history = pretrain_backbone(config, model, prepare_data(config, seeds), seeds)
    path = out / BACKBONE_CHECKPOINT
    save_checkpoint(path, model.checkpoint_groups()[BACKBONE_CHECKPOINT], {"history": history})
    (out / "config.json").write_text(config.model_dump_json(indent=2))
    utils.write_manifest(out, [path, out / "config.json"], config.seed, "pretrain", config)
    return path
