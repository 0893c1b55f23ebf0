from .arg_parser import parse_args
from .augment import augment
from .config_parser import RunConfig
from .data import gen_synthetic_pair, prepare_domains, resolve_data_path
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, FormatError
from .io import (
    ABLATION_COLUMNS,
    CsvWriter,
    MetricsWriter,
    load_checkpoint,
    save_checkpoint,
    write_json,
    write_jsonl,
    write_ppm,
    write_triptych,
)
from .logger import logger, setup_logger
from .tensor import no_grad
from .trainer import ABLATIONS, build_nets, build_optimizers, evaluate, train
from dataclasses import replace
import numpy as np
import os

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4

PREVIEW_STREAM = 7


def load_run_config(args):
    return RunConfig(args.config, overrides={"seed": args.seed})


def warn_if_unreachable(run_config):
    """The bounded augmenter cannot reproduce a synthetic style outside its gains."""
    if run_config["dataset"] != "synthetic":
        return
    style = run_config.domain_style()
    if not style.within_gains(run_config["g_c"], run_config["g_geo"]):
        logger.warning(
            f"Synthetic target style lies outside the augmentation gains "
            f"(g_c={run_config['g_c']}, g_geo={run_config['g_geo']}); the augmenter "
            "can only approach it"
        )


def _restore(nets, state, checkpoint):
    try:
        nets.load_state_dict(state)
    except (ContractError, DimensionError) as e:
        raise CheckpointError(f"{checkpoint}: {e}")


def make_nets(run_config, domains, cfg):
    source = domains.source_train
    nets = build_nets(
        source.channels,
        source.num_classes,
        cfg.seed,
        run_config.augment_config(),
        run_config["extractor_seed"],
    )
    if run_config["extractor_weights"]:
        path = resolve_data_path(run_config["extractor_weights"], run_config["data_dir"])
        logger.info(f"Loading style extractor weights from {path}")
        try:
            nets.extractor.load_state_dict(load_checkpoint(path), "extractor.")
        except (ContractError, DimensionError) as e:
            raise CheckpointError(f"{path}: {e}")
    return nets


def checkpoint_state(result):
    state = result.nets.state_dict()
    state.update(result.optimizers.state_dict())
    return state


def run_training(run_config, cfg, domains, out_dir=None, save_checkpoints=True):
    """Train one configuration; with ``out_dir`` write metrics.csv and checkpoints."""
    nets = make_nets(run_config, domains, cfg)
    optimizers = build_optimizers(nets, cfg)
    kwargs = dict(
        nets=nets,
        optimizers=optimizers,
        source_test=domains.source_test,
        target_test=domains.target_test,
    )
    if out_dir is None:
        return train(domains.source_train, domains.target_shots, cfg, **kwargs)

    os.makedirs(out_dir, exist_ok=True)
    checkpoint_dir = os.path.join(out_dir, "checkpoints")
    if save_checkpoints:
        os.makedirs(checkpoint_dir, exist_ok=True)

    def save_epoch(epoch, result):
        if save_checkpoints:
            save_checkpoint(
                checkpoint_state(result), os.path.join(checkpoint_dir, f"epoch_{epoch:03d}.tosu")
            )

    with MetricsWriter(os.path.join(out_dir, "metrics.csv")) as writer:
        result = train(
            domains.source_train,
            domains.target_shots,
            cfg,
            on_row=writer.write_row,
            on_epoch=save_epoch,
            **kwargs,
        )
    if save_checkpoints:
        save_checkpoint(checkpoint_state(result), os.path.join(checkpoint_dir, "final.tosu"))
    return result


def cmd_train(args):
    run_config = load_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    setup_logger(args.log_level, os.path.join(args.out, "train.log"))
    cfg = run_config.train_config()
    warn_if_unreachable(run_config)
    domains = prepare_domains(run_config, cfg.seed)
    result = run_training(run_config, cfg, domains, args.out)

    write_json(
        {
            "config": dict(run_config),
            "source_acc": result.source_acc,
            "target_acc": result.target_acc,
            "step_counts": result.step_counts,
        },
        os.path.join(args.out, "summary.json.gz"),
    )
    target_acc = result.target_acc if result.target_acc is not None else float("nan")
    print(f"target_acc={target_acc:.4f}")
    return EXIT_OK


def _restored_run(args):
    run_config = load_run_config(args)
    cfg = run_config.train_config()
    state = load_checkpoint(args.checkpoint)
    domains = prepare_domains(run_config, cfg.seed)
    nets = make_nets(run_config, domains, cfg)
    _restore(nets, state, args.checkpoint)
    return run_config, cfg, domains, nets


def cmd_eval(args):
    run_config, cfg, domains, nets = _restored_run(args)
    splits = {
        "source_train": domains.source_train,
        "source_test": domains.source_test,
        "target_test": domains.target_test,
    }
    acc = evaluate(nets.classifier, splits[args.split], cfg.eval_batch_size)
    logger.info(f"{args.split}: {len(splits[args.split])} images")
    print(f"acc={acc:.4f}")
    return EXIT_OK


def cmd_preview(args):
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    run_config, cfg, domains, nets = _restored_run(args)
    source = domains.source_train
    indices = np.arange(args.count) % len(source)
    rng = np.random.default_rng([cfg.seed, PREVIEW_STREAM])
    z = nets.augmenter.sample_noise(rng, args.count)
    labels = np.zeros((args.count, source.num_classes))
    labels[np.arange(args.count), source.labels[indices]] = 1.0
    with no_grad():
        augmented, _ = augment(source.images[indices], labels, z, nets.augmenter)

    os.makedirs(args.out, exist_ok=True)
    shots = domains.target_shots
    for i, index in enumerate(indices):
        write_triptych(
            source.images[index],
            augmented.data[i],
            shots[i % len(shots)],
            os.path.join(args.out, f"preview_{i:03d}.ppm"),
        )
    logger.info(f"Wrote {args.count} previews to {args.out}")
    return EXIT_OK


def summarise_variant(variant, results, seeds):
    target = np.array([r.target_acc for r in results], dtype=np.float64)
    source = np.array([r.source_acc for r in results], dtype=np.float64)
    return {
        "variant": variant,
        "mean_target_acc": float(target.mean()),
        "std_target_acc": float(target.std(ddof=1)) if len(target) > 1 else 0.0,
        "mean_source_acc": float(source.mean()),
        "step2_count": sum(r.step_counts["augmenter"] for r in results),
        "seeds": " ".join(str(s) for s in seeds),
    }


def cmd_ablate(args):
    run_config = load_run_config(args)
    base = run_config.train_config()
    seeds = [args.seed] if args.seed is not None else run_config["ablation_seeds"]
    os.makedirs(args.out, exist_ok=True)
    setup_logger(args.log_level, os.path.join(args.out, "ablate.log"))
    warn_if_unreachable(run_config)

    domains_by_seed = {seed: prepare_domains(run_config, seed) for seed in seeds}
    records = []
    with CsvWriter(os.path.join(args.out, "ablation.csv"), ABLATION_COLUMNS) as writer:
        for variant in ABLATIONS:
            results = []
            for seed in seeds:
                logger.info(f"Ablation {variant}, seed {seed}")
                cfg = replace(base, ablation=variant, seed=seed)
                run_dir = os.path.join(args.out, "runs", f"{variant}_seed{seed}")
                result = run_training(
                    run_config, cfg, domains_by_seed[seed], run_dir, save_checkpoints=False
                )
                results.append(result)
                records.append(
                    {
                        "variant": variant,
                        "seed": seed,
                        "source_acc": result.source_acc,
                        "target_acc": result.target_acc,
                        "step_counts": result.step_counts,
                    }
                )
            row = summarise_variant(variant, results, seeds)
            writer.write_row(row)
            logger.info(
                f"{variant}: target_acc {row['mean_target_acc']:.4f} "
                f"± {row['std_target_acc']:.4f} over {len(seeds)} seed(s)"
            )
    write_jsonl(records, os.path.join(args.out, "ablation_runs.jsonl.gz"))
    return EXIT_OK


def cmd_gen_data(args):
    run_config = load_run_config(args)
    if run_config["dataset"] != "synthetic":
        raise ConfigError("gen-data needs dataset = synthetic", path=args.config)
    seed = run_config["seed"]
    source, target = gen_synthetic_pair(
        seed, run_config["per_class"], run_config.domain_style(), run_config["channels"]
    )
    index = []
    for domain, image_set in (("source", source), ("target", target)):
        domain_dir = os.path.join(args.out, domain)
        os.makedirs(domain_dir, exist_ok=True)
        for i, (image, label) in enumerate(zip(image_set.images, image_set.labels)):
            file_name = f"{i:05d}_{label}.ppm"
            write_ppm(image, os.path.join(domain_dir, file_name))
            index.append({"domain": domain, "file": f"{domain}/{file_name}", "label": int(label)})
        logger.info(f"Wrote {len(image_set)} {domain} images to {domain_dir}")
    write_jsonl(index, os.path.join(args.out, "index.jsonl.gz"))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "preview": cmd_preview,
    "ablate": cmd_ablate,
    "gen-data": cmd_gen_data,
}


def main(argv=None):
    args = parse_args(argv)
    setup_logger(args.log_level)

    try:
        return COMMANDS[args.command](args)
    except CheckpointError as e:
        logger.error(str(e))
        return EXIT_CHECKPOINT
    except (ConfigError, ContractError, DimensionError) as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except (OSError, FormatError) as e:
        logger.error(str(e))
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
