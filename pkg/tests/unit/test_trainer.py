"""Unit tests for trainer.py."""

import numpy as np
import pytest

from tosuda.augment import AugmentConfig, augment
from tosuda.classifier import classify_forward, cross_entropy
from tosuda.data import Batch, LabeledImageSet, batches, gen_synthetic_pair
from tosuda.errors import ConfigError, ContractError
from tosuda.layers import Linear
from tosuda.style import GramSet, style_loss
from tosuda.tensor import no_grad
from tosuda.trainer import (
    MomentumSGD,
    TrainConfig,
    build_nets,
    build_optimizers,
    evaluate,
    step_augmenter,
    step_classifier,
    train,
)
from tosuda.utils.common import digest_arrays

SMALL = AugmentConfig(noise_dim=4, hidden_width=8, hidden_layers=1)


@pytest.fixture(scope="module")
def domains():
    return gen_synthetic_pair(0, 2)


@pytest.fixture
def nets():
    return build_nets(3, 5, seed=0, augment_config=SMALL)


def first_batch(image_set, size=4):
    return next(batches(image_set, size, seed=0, epoch=1))


def augmented_losses(batch, nets, z, target):
    """Class and style loss of the current augmenter on a fixed batch and noise."""
    with no_grad():
        x_hat, _ = augment(batch.images, batch.onehot, z, nets.augmenter)
        l_class = cross_entropy(classify_forward(x_hat, nets.classifier), batch.onehot).item()
        l_style = style_loss(x_hat, target, nets.extractor).item()
    return l_class, l_style


def test_train_config_validation():
    """Test TrainConfig range checks and ablation switches."""
    # This test verifies that:
    # 1. n < 1, momentum >= 1, non-finite rates and unknown ablations raise ConfigError
    # 2. no_style zeroes lambda_style and no_adv zeroes lambda_adv
    # 3. source_only disables the augmenter
    with pytest.raises(ConfigError):
        TrainConfig(n=0)
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_cls=float("nan"))
    with pytest.raises(ConfigError):
        TrainConfig(lambda_adv=float("inf"))
    with pytest.raises(ConfigError):
        TrainConfig(ablation="no_classifier")
    with pytest.raises(ConfigError):
        TrainConfig(target_pairing="random")

    assert TrainConfig(lambda_style=2.0, lambda_adv=3.0).effective_lambdas() == (2.0, 3.0)
    assert TrainConfig(ablation="no_style", lambda_adv=3.0).effective_lambdas() == (0.0, 3.0)
    assert TrainConfig(ablation="no_adv", lambda_style=2.0).effective_lambdas() == (2.0, 0.0)
    assert not TrainConfig(ablation="source_only").uses_augmenter


def test_momentum_sgd_update_rule(rng):
    """Test v <- mu*v + g; theta <- theta - lr*v over two steps."""
    # This test verifies that:
    # 1. The first step moves by lr*g
    # 2. The second step adds the decayed velocity
    # 3. The optimizer state round-trips through state_dict
    layer = Linear(2, 1, rng)
    opt = MomentumSGD(layer, lr=0.1, momentum=0.9)
    theta = layer.weight.data.copy()
    g = np.array([[1.0], [-2.0]])

    layer.weight.grad = g.copy()
    layer.bias.grad = np.zeros(1)
    opt.step()
    assert np.allclose(layer.weight.data, theta - 0.1 * g)
    opt.step()
    assert np.allclose(layer.weight.data, theta - 0.1 * g - 0.1 * (0.9 * g + g))

    other = MomentumSGD(layer, lr=0.1, momentum=0.9)
    other.state.load_state_dict(opt.state.state_dict("optim."), "optim.")
    assert np.array_equal(other.state.velocity["weight"], 1.9 * g)


def test_step_classifier_freezes_augmenter(domains, nets, rng):
    """Test step_classifier's update contract."""
    # This test verifies that:
    # 1. Only the classifier's parameters change
    # 2. The returned loss is the pre-update loss
    # 3. With a tiny learning rate, the loss on the same batch and noise does not rise
    source, target = domains
    cfg = TrainConfig(lr_cls=1e-5, momentum=0.0)
    opt = build_optimizers(nets, cfg)
    batch = first_batch(source)
    z = nets.augmenter.sample_noise(rng, len(batch))
    before = augmented_losses(batch, nets, z, target.images[:1])[0]
    augmenter_digest = nets.augmenter.digest()
    extractor_digest = nets.extractor.digest()
    classifier_digest = nets.classifier.digest()

    loss = step_classifier(batch, nets, opt.classifier, cfg, z=z)

    assert loss == before
    assert nets.augmenter.digest() == augmenter_digest
    assert nets.extractor.digest() == extractor_digest
    assert nets.classifier.digest() != classifier_digest
    assert augmented_losses(batch, nets, z, target.images[:1])[0] <= before + 1e-9


def test_step_augmenter_ascends_class_loss(domains, nets, rng):
    """Test the adversarial direction of step 2 without the style term."""
    # This test verifies that:
    # 1. With lambda_style = 0 and a tiny learning rate, the class loss on the
    #    same batch and noise does not fall
    # 2. The classifier and the extractor are bit-unchanged
    # 3. The extractor is never evaluated
    source, target = domains
    cfg = TrainConfig(lr_aug=1e-5, momentum=0.0, lambda_style=0.0, lambda_adv=1.0)
    opt = build_optimizers(nets, cfg)
    batch = first_batch(source)
    z = nets.augmenter.sample_noise(rng, len(batch))
    classifier_digest = nets.classifier.digest()
    before = augmented_losses(batch, nets, z, target.images[:1])[0]
    nets.extractor.calls = 0

    l_style, l_class = step_augmenter(batch, target.images[:1], nets, opt.augmenter, cfg, z=z)

    assert l_style is None
    assert l_class == before
    assert nets.extractor.calls == 0
    assert nets.classifier.digest() == classifier_digest
    assert augmented_losses(batch, nets, z, target.images[:1])[0] >= before - 1e-9


def test_step_augmenter_descends_style_loss(domains, nets, rng):
    """Test the style direction of step 2 without the adversarial term."""
    # This test verifies that:
    # 1. With lambda_adv = 0 and a tiny learning rate, the style loss on the
    #    same batch and noise does not rise
    # 2. The classifier's gradient buffers stay zero
    source, target = domains
    cfg = TrainConfig(lr_aug=1e-5, momentum=0.0, ablation="no_adv")
    opt = build_optimizers(nets, cfg)
    batch = first_batch(source)
    z = nets.augmenter.sample_noise(rng, len(batch))
    shot = target.images[:1]
    before = augmented_losses(batch, nets, z, shot)[1]
    zero_grads = digest_arrays(
        {name: np.zeros_like(p.data) for name, p in nets.classifier.named_parameters()}
    )

    l_style, _ = step_augmenter(batch, shot, nets, opt.augmenter, cfg, z=z)

    assert abs(l_style - before) <= 1e-12
    assert nets.classifier.grad_digest() == zero_grads
    assert augmented_losses(batch, nets, z, shot)[1] <= before + 1e-9


def test_step_contracts(domains, nets):
    """Test the error contracts of both steps."""
    # This test verifies that:
    # 1. An empty batch raises ContractError
    # 2. Step 2 without any target raises ContractError
    source, _ = domains
    cfg = TrainConfig()
    opt = build_optimizers(nets, cfg)
    batch = first_batch(source)
    empty = Batch(batch.images[:0], batch.labels[:0], batch.onehot[:0], batch.indices[:0])
    with pytest.raises(ContractError):
        step_classifier(empty, nets, opt.classifier, cfg)
    with pytest.raises(ContractError):
        step_augmenter(batch, [], nets, opt.augmenter, cfg)


def test_schedule_counter_carries_across_epochs(domains):
    """Test the step-1/step-2 schedule."""
    # This test verifies that:
    # 1. With n = 3 and 7 batches per epoch, step 2 fires after batches 3 and 6
    #    of the first epoch, and after batches 2 and 5 of the second
    # 2. #step1 = n * #step2 + residue with residue < n
    # 3. Each epoch ends with one eval row
    source, target = domains
    cfg = TrainConfig(n=3, batch_size=1, epochs=2, seed=0)
    result = train(source.subset(np.arange(7)), target.images[:1], cfg, augment_config=SMALL)

    phases = [row["phase"] for row in result.history]
    epoch1 = phases[: phases.index("eval") + 1]
    expected = ["classifier"] * 3 + ["augmenter"] + ["classifier"] * 3 + ["augmenter"]
    assert epoch1 == expected + ["classifier", "eval"]
    epoch2 = phases[len(epoch1) :]
    expected = ["classifier"] * 2 + ["augmenter"] + ["classifier"] * 3 + ["augmenter"]
    assert epoch2 == expected + ["classifier", "classifier", "eval"]

    counts = result.step_counts
    assert counts["classifier"] == 14 and counts["augmenter"] == 4
    assert 0 <= counts["classifier"] - 3 * counts["augmenter"] < 3
    assert [row["step"] for row in result.history if row["phase"] != "eval"] == list(range(1, 19))


def test_strict_alternation_with_n_equal_1(domains):
    """Test n = 1."""
    # This test verifies that:
    # 1. The schedule alternates classifier, augmenter, classifier, ...
    source, target = domains
    cfg = TrainConfig(n=1, batch_size=4, epochs=1)
    result = train(source, target.images[:1], cfg, augment_config=SMALL)
    phases = [row["phase"] for row in result.history if row["phase"] != "eval"]
    assert phases == ["classifier", "augmenter"] * 3


def test_train_is_deterministic(domains):
    """Test that the same configuration and seed reproduce a run bit for bit."""
    # This test verifies that:
    # 1. Two runs give identical metrics histories
    # 2. Two runs give identical final parameters and optimizer state
    # 3. The extractor is unchanged by training
    source, target = domains
    cfg = TrainConfig(n=2, batch_size=4, epochs=2, seed=5)
    runs = [
        train(source, target.images[:1], cfg, augment_config=SMALL, source_test=source)
        for _ in range(2)
    ]
    assert runs[0].history == runs[1].history
    assert digest_arrays(runs[0].nets.state_dict()) == digest_arrays(runs[1].nets.state_dict())
    assert digest_arrays(runs[0].optimizers.state_dict()) == digest_arrays(
        runs[1].optimizers.state_dict()
    )
    assert runs[0].nets.extractor.digest() == build_nets(3, 5, 5, SMALL).extractor.digest()


def test_source_only_never_touches_the_augmenter(domains):
    """Test the source_only ablation."""
    # This test verifies that:
    # 1. Step 2 never runs
    # 2. The augmenter parameters are unchanged
    # 3. The extractor is never evaluated
    source, target = domains
    cfg = TrainConfig(batch_size=4, epochs=1, ablation="source_only", n=1)
    nets = build_nets(3, 5, cfg.seed, SMALL)
    digest = nets.augmenter.digest()
    result = train(source, target.images[:1], cfg, nets=nets)
    assert result.step_counts["augmenter"] == 0
    assert nets.augmenter.digest() == digest
    assert nets.extractor.calls == 0


def test_no_style_run_never_evaluates_the_extractor(domains):
    """Test the no_style ablation over a whole run."""
    # This test verifies that:
    # 1. Step 2 runs, but the extractor's call counter stays at 0
    source, target = domains
    cfg = TrainConfig(batch_size=4, epochs=1, ablation="no_style", n=1)
    nets = build_nets(3, 5, cfg.seed, SMALL)
    result = train(source, target.images[:1], cfg, nets=nets)
    assert result.step_counts["augmenter"] == 3
    assert nets.extractor.calls == 0


def test_pretrain_epochs(domains):
    """Test plain source epochs before the two-step schedule."""
    # This test verifies that:
    # 1. Pretrain rows come first and have phase pretrain
    # 2. Pretrain steps do not advance the step-2 schedule
    source, target = domains
    cfg = TrainConfig(n=2, batch_size=4, epochs=1, pretrain_epochs=1)
    result = train(source, target.images[:1], cfg, augment_config=SMALL)
    phases = [row["phase"] for row in result.history]
    assert phases[:4] == ["pretrain"] * 3 + ["eval"]
    assert phases[4:] == ["classifier", "classifier", "augmenter", "classifier", "eval"]
    assert result.step_counts == {"pretrain": 3, "classifier": 3, "augmenter": 1}


def test_few_shot_targets(domains):
    """Test training with several targets and both pairing modes."""
    # This test verifies that:
    # 1. num_targets must match the number of target images given
    # 2. per_batch and per_sample pairing both complete and record style losses
    # 3. Cached GramSets are accepted as targets
    source, target = domains
    with pytest.raises(ContractError):
        train(source, target.images[:1], TrainConfig(num_targets=2, epochs=1))

    for pairing in ("per_batch", "per_sample"):
        cfg = TrainConfig(n=1, batch_size=4, epochs=1, num_targets=3, target_pairing=pairing)
        result = train(source, target.images[:3], cfg, augment_config=SMALL)
        styles = [row["l_style"] for row in result.history if row["phase"] == "augmenter"]
        assert len(styles) == 3 and all(s >= 0.0 for s in styles)

    nets = build_nets(3, 5, 0, SMALL)
    cfg = TrainConfig(num_targets=2, target_pairing="per_sample")
    grams = [GramSet.from_image(t, nets.extractor) for t in target.images[:2]]
    opt = build_optimizers(nets, cfg)
    l_style, _ = step_augmenter(
        first_batch(source), grams, nets, opt.augmenter, cfg, rng=np.random.default_rng(0)
    )
    assert l_style >= 0.0


def test_evaluate(domains, nets):
    """Test evaluate on a labelled set."""
    # This test verifies that:
    # 1. A net whose bias always favours the true class of a one-class set scores 1.0
    # 2. Evaluation is deterministic
    source, _ = domains
    only_disks = source.subset(np.flatnonzero(source.labels == 1))
    nets.classifier.fc3.bias.data = np.array([0.0, 1e6, 0.0, 0.0, 0.0])
    assert evaluate(nets.classifier, only_disks) == 1.0
    assert evaluate(nets.classifier, source) == evaluate(nets.classifier, source)


def test_evaluate_untrained_net_is_at_chance(rng):
    """Test evaluate with an untrained classifier on inputs unrelated to the labels."""
    # This test verifies that:
    # 1. On five balanced classes the accuracy is 0.2 within 0.05
    images = rng.uniform(0.0, 1.0, (500, 3, 32, 32))
    labels = np.arange(500) % 5
    net = build_nets(3, 5, seed=0, augment_config=SMALL).classifier
    acc = evaluate(net, LabeledImageSet(images, labels, 5), batch_size=100)
    assert abs(acc - 0.2) <= 0.05
