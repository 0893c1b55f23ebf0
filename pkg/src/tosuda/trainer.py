"""
Two-step alternating optimisation.

Step 1 trains the classifier on augmented source batches while the
augmenter is frozen. Every ``n`` step-1 updates, step 2 trains the augmenter
on the same batch to pull its style towards the target image(s) and push the
classification loss up, with the classifier frozen. The style extractor is
frozen throughout.
"""

from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentationModule, augment
from .classifier import ClassifierNet, accuracy, classify_forward, cross_entropy, predict_logits
from .data import batches, resize_bilinear
from .errors import ConfigError, ContractError
from .logger import logger
from .style import GramSet, StyleExtractor, style_loss
from .tensor import backward, no_grad

ABLATIONS = ("full", "no_style", "no_adv", "source_only")
TARGET_PAIRINGS = ("per_batch", "per_sample")
PHASES = ("pretrain", "classifier", "augmenter", "eval")

# independent random streams derived from the run seed
MODEL_STREAM = 0
NOISE_STREAM = 1
TARGET_DRAW_STREAM = 2


@dataclass(frozen=True)
class TrainConfig:
    n: int = 2
    lambda_style: float = 1.0
    lambda_adv: float = 0.03
    lr_cls: float = 0.01
    lr_aug: float = 0.005
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    pretrain_epochs: int = 0
    seed: int = 0
    num_targets: int = 1
    target_pairing: str = "per_batch"
    ablation: str = "full"
    eval_batch_size: int = 256

    def __post_init__(self):
        for name in ("lambda_style", "lambda_adv", "lr_cls", "lr_aug", "momentum"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite, got {getattr(self, name)}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.lambda_style < 0 or self.lambda_adv < 0:
            raise ConfigError("Loss weights must be >= 0")
        if self.lr_cls < 0 or self.lr_aug < 0:
            raise ConfigError("Learning rates must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("Batch sizes must be >= 1")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("Epoch counts must be >= 0")
        if self.num_targets < 1:
            raise ConfigError(f"num_targets must be >= 1, got {self.num_targets}")
        if self.target_pairing not in TARGET_PAIRINGS:
            raise ConfigError(
                f"target_pairing must be one of {', '.join(TARGET_PAIRINGS)}, "
                f"got {self.target_pairing}"
            )
        if self.ablation not in ABLATIONS:
            raise ConfigError(
                f"ablation must be one of {', '.join(ABLATIONS)}, got {self.ablation}"
            )

    def effective_lambdas(self):
        """(lambda_style, lambda_adv) after the ablation switch."""
        if self.ablation == "no_style":
            return 0.0, self.lambda_adv
        if self.ablation == "no_adv":
            return self.lambda_style, 0.0
        return self.lambda_style, self.lambda_adv

    @property
    def uses_augmenter(self):
        return self.ablation != "source_only"


class OptimizerState:
    """Velocity buffers keyed by parameter name."""

    def __init__(self, named_parameters):
        self.velocity = {name: np.zeros_like(p.data) for name, p in named_parameters}

    def state_dict(self, prefix=""):
        return {f"{prefix}{name}": v.copy() for name, v in self.velocity.items()}

    def load_state_dict(self, state, prefix=""):
        for name, v in self.velocity.items():
            key = f"{prefix}{name}"
            if key not in state:
                raise ContractError(f"Missing optimizer buffer {key}")
            array = np.asarray(state[key], dtype=np.float64)
            if array.shape != v.shape:
                raise ContractError(f"Optimizer buffer {key} has shape {array.shape}, expected {v.shape}")
            self.velocity[name] = array.copy()


class MomentumSGD:
    def __init__(self, module, lr, momentum):
        self.lr = lr
        self.momentum = momentum
        self.params = module.named_parameters()
        self.state = OptimizerState(self.params)

    def step(self):
        # v <- mu*v + g; theta <- theta - lr*v
        for name, p in self.params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.momentum * self.state.velocity[name] + grad
            self.state.velocity[name] = v
            p.data = p.data - self.lr * v


@dataclass
class Nets:
    classifier: ClassifierNet
    augmenter: AugmentationModule
    extractor: StyleExtractor

    def state_dict(self):
        state = self.classifier.state_dict("classifier.")
        state.update(self.augmenter.state_dict("augmenter."))
        return state

    def load_state_dict(self, state):
        self.classifier.load_state_dict(state, "classifier.")
        self.augmenter.load_state_dict(state, "augmenter.")
        if any(name.startswith("extractor.") for name in state):
            self.extractor.load_state_dict(state, "extractor.")


@dataclass
class Optimizers:
    classifier: MomentumSGD
    augmenter: MomentumSGD

    def state_dict(self):
        state = self.classifier.state.state_dict("optim.classifier.")
        state.update(self.augmenter.state.state_dict("optim.augmenter."))
        return state

    def load_state_dict(self, state):
        self.classifier.state.load_state_dict(state, "optim.classifier.")
        self.augmenter.state.load_state_dict(state, "optim.augmenter.")


def build_nets(channels, num_classes, seed, augment_config=None, extractor_seed=0):
    rng = np.random.default_rng([seed, MODEL_STREAM])
    return Nets(
        ClassifierNet(channels, num_classes, rng),
        AugmentationModule(channels, num_classes, rng, augment_config),
        StyleExtractor(channels, extractor_seed),
    )


def build_optimizers(nets, cfg):
    return Optimizers(
        MomentumSGD(nets.classifier, cfg.lr_cls, cfg.momentum),
        MomentumSGD(nets.augmenter, cfg.lr_aug, cfg.momentum),
    )


def _check_batch(batch):
    if len(batch) == 0:
        raise ContractError("Empty batch")


def step_classifier(batch, nets, opt, cfg, z=None, rng=None, augment_inputs=True):
    """
    One update of the classifier on the (augmented) batch. The augmenter is
    frozen. Returns the pre-update cross-entropy.
    """
    _check_batch(batch)
    nets.augmenter.requires_grad_(False)
    nets.classifier.requires_grad_(True)
    nets.augmenter.zero_grad()
    nets.classifier.zero_grad()

    x = batch.images
    if augment_inputs and cfg.uses_augmenter:
        if z is None:
            z = nets.augmenter.sample_noise(rng or np.random.default_rng(cfg.seed), len(batch))
        with no_grad():
            x, _ = augment(x, batch.onehot, z, nets.augmenter)

    loss = cross_entropy(classify_forward(x, nets.classifier), batch.onehot)
    backward(loss)
    opt.step()
    return loss.item()


def target_gram_sets(targets, extractor):
    """GramSets for target images; a list of GramSets is passed through."""
    if isinstance(targets, (list, tuple)) and targets and isinstance(targets[0], GramSet):
        return list(targets)
    return [GramSet.from_image(t, extractor) for t in np.asarray(targets)]


def _select_targets(grams, batch_size, cfg, rng, target_index):
    if target_index is None:
        if len(grams) == 1:
            target_index = 0 if cfg.target_pairing == "per_batch" else np.zeros(batch_size, int)
        else:
            rng = rng or np.random.default_rng(cfg.seed)
            size = None if cfg.target_pairing == "per_batch" else batch_size
            target_index = rng.integers(len(grams), size=size)
    if np.ndim(target_index) == 0:
        return grams[int(target_index)]
    return [grams[int(i)] for i in target_index]


def step_augmenter(batch, targets, nets, opt, cfg, z=None, rng=None, target_index=None):
    """
    One update of the augmenter on
    ``lambda_style * L_style - lambda_adv * L_class`` with the classifier frozen.

    ``targets`` holds target images (N×C×H×W) or their cached GramSets.
    Returns (style loss or None when the style term is ablated, class loss).
    """
    _check_batch(batch)
    if targets is None or len(targets) == 0:
        raise ContractError("No target available for the style loss")
    nets.classifier.requires_grad_(False)
    nets.augmenter.requires_grad_(True)
    nets.classifier.zero_grad()
    nets.augmenter.zero_grad()

    if z is None:
        z = nets.augmenter.sample_noise(rng or np.random.default_rng(cfg.seed), len(batch))
    x_hat, _ = augment(batch.images, batch.onehot, z, nets.augmenter)
    lambda_style, lambda_adv = cfg.effective_lambdas()

    objective = None
    l_style = None
    if lambda_style > 0:
        grams = target_gram_sets(targets, nets.extractor)
        target = _select_targets(grams, len(batch), cfg, rng, target_index)
        style = style_loss(x_hat, target, nets.extractor)
        l_style = style.item()
        objective = style * lambda_style

    if lambda_adv > 0:
        class_loss = cross_entropy(classify_forward(x_hat, nets.classifier), batch.onehot)
        adversarial = class_loss * (-lambda_adv)
        objective = adversarial if objective is None else objective + adversarial
    else:
        with no_grad():
            class_loss = cross_entropy(classify_forward(x_hat.detach(), nets.classifier), batch.onehot)

    if objective is not None:
        backward(objective)
    opt.step()
    return l_style, class_loss.item()


def evaluate(net, labeled_set, batch_size=256):
    """Accuracy over the whole set; no augmentation at test time."""
    return accuracy(predict_logits(net, labeled_set.images, batch_size), labeled_set.labels)


@dataclass
class TrainResult:
    nets: Nets
    optimizers: Optimizers
    history: list = field(default_factory=list)
    step_counts: dict = field(default_factory=dict)
    source_acc: float = None
    target_acc: float = None


def _row(epoch, step, phase, l_class=None, l_style=None, source_acc=None, target_acc=None):
    return {
        "epoch": epoch,
        "step": step,
        "phase": phase,
        "l_class": l_class,
        "l_style": l_style,
        "source_acc": source_acc,
        "target_acc": target_acc,
    }


def train(
    source,
    target_shots,
    cfg,
    nets=None,
    optimizers=None,
    source_test=None,
    target_test=None,
    augment_config=None,
    extractor_seed=0,
    on_row=None,
    on_epoch=None,
):
    """
    Run ``pretrain_epochs`` of plain source training, then ``epochs`` of the
    two-step schedule. Target labels are never read; only ``target_shots``
    (N×C×H×W images) reach the style loss.

    ``on_row(row)`` receives every metrics row as it is produced and
    ``on_epoch(epoch, result)`` runs after each epoch's evaluation row.
    """
    target_shots = np.asarray(target_shots, dtype=np.float64)
    if target_shots.ndim == 3:
        target_shots = target_shots[None]
    if len(target_shots) != cfg.num_targets:
        raise ContractError(
            f"Expected {cfg.num_targets} target image(s), got {len(target_shots)}"
        )
    if target_shots.shape[2:] != source.images.shape[2:]:
        logger.info(
            f"Resizing target images from {target_shots.shape[2:]} to {source.images.shape[2:]}"
        )
        target_shots = resize_bilinear(target_shots, source.images.shape[2])

    if nets is None:
        nets = build_nets(
            source.channels, source.num_classes, cfg.seed, augment_config, extractor_seed
        )
    if optimizers is None:
        optimizers = build_optimizers(nets, cfg)
    result = TrainResult(
        nets, optimizers, step_counts={"pretrain": 0, "classifier": 0, "augmenter": 0}
    )

    noise_rng = np.random.default_rng([cfg.seed, NOISE_STREAM])
    target_rng = np.random.default_rng([cfg.seed, TARGET_DRAW_STREAM])
    lambda_style, _ = cfg.effective_lambdas()
    targets = target_shots
    if cfg.uses_augmenter and lambda_style > 0:
        targets = target_gram_sets(target_shots, nets.extractor)
        logger.debug(f"Cached Gram matrices for {len(targets)} target image(s)")

    def emit(row):
        result.history.append(row)
        if on_row is not None:
            on_row(row)

    step = 0
    since_step2 = 0
    total_epochs = cfg.pretrain_epochs + cfg.epochs
    for epoch in range(1, total_epochs + 1):
        pretraining = epoch <= cfg.pretrain_epochs
        for batch in batches(source, cfg.batch_size, cfg.seed, epoch):
            phase = "pretrain" if pretraining else "classifier"
            z = None
            if not pretraining and cfg.uses_augmenter:
                z = nets.augmenter.sample_noise(noise_rng, len(batch))
            l_class = step_classifier(
                batch, nets, optimizers.classifier, cfg, z=z, augment_inputs=not pretraining
            )
            step += 1
            result.step_counts[phase] += 1
            emit(_row(epoch, step, phase, l_class=l_class))
            logger.debug(f"epoch {epoch} step {step} {phase}: l_class={l_class:.6g}")

            if pretraining or not cfg.uses_augmenter:
                continue
            since_step2 += 1
            if since_step2 < cfg.n:
                continue
            since_step2 = 0
            z = nets.augmenter.sample_noise(noise_rng, len(batch))
            l_style, l_class = step_augmenter(
                batch, targets, nets, optimizers.augmenter, cfg, z=z, rng=target_rng
            )
            step += 1
            result.step_counts["augmenter"] += 1
            emit(_row(epoch, step, "augmenter", l_class=l_class, l_style=l_style))
            logger.debug(f"epoch {epoch} step {step} augmenter: l_class={l_class:.6g}, l_style={l_style}")

        result.source_acc = (
            evaluate(nets.classifier, source_test, cfg.eval_batch_size)
            if source_test is not None
            else None
        )
        result.target_acc = (
            evaluate(nets.classifier, target_test, cfg.eval_batch_size)
            if target_test is not None
            else None
        )
        emit(_row(epoch, step, "eval", source_acc=result.source_acc, target_acc=result.target_acc))
        logger.info(
            f"Epoch {epoch}/{total_epochs}: source_acc={result.source_acc}, "
            f"target_acc={result.target_acc}"
        )
        if on_epoch is not None:
            on_epoch(epoch, result)

    # both trainable again after the last step
    nets.classifier.requires_grad_(True)
    nets.augmenter.requires_grad_(True)
    return result
