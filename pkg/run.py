import os
import sys

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed
from test_tube import HyperOptArgumentParser

from cleaning import clean_items, load_items, load_oracle, write_id_list
from dataset import generate_world, subsample_target_train
from model.model import embed
from results.eval import fr_metrics, summarize, threshold_for_spec, write_report
from scanning import (build_database, compute_hashes, forge_collision, fp_study, match_hashes,
                      reduce_templates, reference_split_fp, select_cover, template_database)
from trainer import (calibrate_thresholds, evaluate_test, fr_individuals, icd_pairs,
                     select_best, train)
from utils.config import config_from_dict, load_config
from utils.errors import ConfigError, NumericalError, UnachievablePrecisionError
from utils.hashing import LshProjector
from utils.logger import Logger
from utils.utils import (create_run_dir, load_checkpoint, make_manifest, manifest_hash, read_json,
                         save_checkpoint, save_params, write_json)
from visualizations.activations import activation_stats, compare_activations, export_heatmap

np.set_printoptions(precision=3)
np.set_printoptions(suppress=True)

C_COMMANDS = ("train", "eval", "simulate", "clean", "forge", "calibrate", "activations")
C_EXIT_OK = 0
C_EXIT_USAGE = 2
C_EXIT_NUMERICAL = 3


def argParser(argv=None):
    """
    This function creates a parser object which parses all the flags from the command line
    We can access the parsed command line values using the args object returned by this function
    Usage:
        First field is the command, the rest are flags.
        dest=NAME is the name to reference when using the parameter (args.NAME)
        default is the default value of the parameter; None keeps the config file value
    Example:
        > python run.py train --config configs/desk.toml --mode dual --seed 1
        args.command <-- 'train'
    """
    parser = HyperOptArgumentParser(strategy='grid_search')

    parser.add_argument("command", choices=C_COMMANDS, help="One of " + ", ".join(C_COMMANDS))

    # program arguments (config, run directory, seeds)
    parser.add_argument("--config", dest="config", default="", help="Path to a TOML config file")
    parser.add_argument("--out", dest="out", default="runs", help="Root directory for run directories")
    parser.add_argument("--run", dest="run", default="", help="Run directory name under --out (default derived from mode and seed)")
    parser.add_argument("--seed", dest="seed", type=int, default=1, help="Training seed")
    parser.add_argument("--seeds", dest="seeds", default="", help="Comma separated seeds, one run (or forge trial) per seed")
    parser.add_argument("--jobs", dest="jobs", type=int, default=1, help="Parallel processes for seed sweeps")

    # training arguments
    parser.add_argument("--mode", dest="mode", default=None, choices=["single", "dual", "multi"], help="Training mode")
    parser.add_argument("--targets", dest="targets", type=int, default=None, help="Number of target individuals (multi mode)")
    parser.add_argument("--ntrain", dest="ntrain", type=int, default=None, help="Keep only this many target training images")

    # evaluation and simulation arguments
    parser.add_argument("--task", dest="task", default="both", choices=["icd", "fr", "both"], help="Evaluation task")
    parser.add_argument("--threshold", dest="threshold", default="p90", choices=["p90", "p95", "p99"], help="Threshold spec")
    parser.add_argument("--templates", dest="templates", default="", help="Comma separated template counts k")
    parser.add_argument("--lsh", dest="lsh", action="store_true", help="Binarize hashes with LSH")
    parser.add_argument("--forge", dest="forge", action="store_true", help="Forge a colliding item against the k=1 template")

    # cleaning arguments
    parser.add_argument("--items", dest="items", default="", help="CSV with columns item_id, individual")
    parser.add_argument("--oracle", dest="oracle", default="", help="JSON face and copy embedding oracle")
    parser.add_argument("--t-mis", dest="t_mis", type=float, default=None, help="Mislabel cosine distance threshold")
    parser.add_argument("--t-dup", dest="t_dup", type=float, default=None, help="Duplicate euclidean distance threshold")

    # hyperparameters (non-tunable; the options document the values tried)
    parser.opt_list("--epochs", dest="epochs", type=int, default=None, help="Number of epochs to train for",
        tunable=False, options=[5, 10, 20])
    parser.opt_list("--b-primary", dest="b_primary", type=int, default=None, help="Primary batch size",
        tunable=False, options=[32, 64, 96])
    parser.opt_list("--b-secondary", dest="b_secondary", type=int, default=None, help="Secondary batch size",
        tunable=False, options=[12, 24, 48])
    parser.opt_range("--w", dest="w", type=float, default=None, help="Weight of the secondary loss",
        tunable=False, low=0.0, high=0.5, nb_samples=6)
    parser.opt_range("--p-T", dest="p_T", type=float, default=None, help="Probability of sampling a target image",
        tunable=False, low=0.0, high=0.5, nb_samples=6)
    parser.opt_list("--M", dest="M", type=int, default=None, help="Cross batch memory size",
        tunable=False, options=[2000, 20000, 22500])
    parser.opt_range("--eta", dest="eta", type=float, default=None, help="Initial learning rate",
        tunable=False, low=1e-3, high=1e-1, nb_samples=4)

    return parser.parse_args(argv)


def parse_int_list(text, name):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("--{} must be a comma separated list of integers, got {}".format(name, text))


def apply_overrides(config, args):
    """ Command-line flags take precedence over the config file
    """
    if args.mode is not None:
        config.training.mode = args.mode
    if args.targets is not None:
        config.world.n_targets = args.targets
    for name in ("epochs", "b_primary", "b_secondary", "w", "p_T", "M", "eta"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config.training, name, value)
    if args.t_mis is not None:
        config.cleaning.t_mis = args.t_mis
    if args.t_dup is not None:
        config.cleaning.t_dup = args.t_dup
    if config.training.mode == "multi" and config.world.n_targets < 2:
        raise ConfigError("multi mode needs --targets K with K >= 2")
    return config.validate()


def get_projector(config, lsh):
    if not lsh:
        return None
    return LshProjector(config.model.l, config.hashing.l_b, seed=config.hashing.lsh_seed)


def run_name(args, seed):
    if args.run:
        return args.run if not args.seeds else "{}_seed{}".format(args.run, seed)
    return "{}_seed{}".format(args.mode or "run", seed)


def train_one(config, seed, out, run, params, ntrain=None):
    """ Train one model and write its run directory
    @param config Validated Config
    @param seed Training seed
    @param params Saveable parameters recorded to params.json
    @return Run directory
    """
    run_dir = create_run_dir(out, run)
    save_params(run_dir, dict(params, seed=seed, config=config.as_dict()))

    world = generate_world(config.world)
    if ntrain is not None:
        world = subsample_target_train(world, ntrain)

    logger = Logger(os.path.join(run_dir, "tb"))
    print("Will log to tensorboard: ", logger.get_logdir())
    epochs = []

    def on_checkpoint(ckpt):
        path, digest = save_checkpoint(run_dir, ckpt.state)
        ckpt.digest = digest
        row = ckpt.metrics()
        row.update({"path": path, "digest": digest,
                    "f1_val": {str(k): v for k, v in sorted(ckpt.f1_val.items())}})
        epochs.append(row)

    print("Starting training...")
    checkpoints = train(config.training, world, seed, model_config=config.model,
                        logger=logger, on_checkpoint=on_checkpoint)
    logger.close()

    best = select_best(checkpoints)
    best_row = epochs[best.epoch - 1]
    write_json(os.path.join(run_dir, "checkpoints", "best.json"),
               {"epoch": best.epoch, "path": best_row["path"], "digest": best.digest, "score": best.score})
    manifest = make_manifest(config.as_dict(), {"world": config.world.seed, "train": seed, "ntrain": ntrain},
                             epochs, best.epoch)
    write_json(os.path.join(run_dir, "manifest.json"), manifest)
    pd.DataFrame([{k: v for k, v in row.items() if k != "f1_val"} for row in epochs]) \
        .to_csv(os.path.join(run_dir, "reports", "validation.csv"), index=False)
    print("Best epoch {} (score {:.4f}), manifest hash {}".format(best.epoch, best.score, manifest_hash(manifest)))
    return run_dir


def load_run(run_dir):
    """ Config, world, best model and manifest of a trained run directory
    """
    manifest = read_json(os.path.join(run_dir, "manifest.json"))
    best = read_json(os.path.join(run_dir, "checkpoints", "best.json"))
    config = config_from_dict(manifest["config"], environ={})
    world = generate_world(config.world)
    ntrain = manifest["seeds"].get("ntrain")
    if ntrain is not None:
        world = subsample_target_train(world, ntrain)
    model, _ = load_checkpoint(os.path.join(run_dir, best["path"]), expected_digest=best["digest"])
    return config, world, model, manifest


def _run_dir(args):
    if not args.run:
        raise ConfigError("--run must name a trained run directory under --out")
    run_dir = os.path.join(args.out, args.run)
    if not os.path.isdir(run_dir):
        raise FileNotFoundError("run directory {} does not exist".format(run_dir))
    return run_dir


def _suffix(args):
    return "_lsh" if args.lsh else ""


def cmd_train(args, config):
    seeds = parse_int_list(args.seeds, "seeds") if args.seeds else [args.seed]
    params = vars(args)
    params = {i: params[i] for i in params if not callable(params[i])
              and isinstance(params[i], (str, int, float, bool, list, type(None)))}
    if len(seeds) == 1:
        return [train_one(config, seeds[0], args.out, run_name(args, seeds[0]), params, args.ntrain)]
    print("Training {} seeds with {} jobs...".format(len(seeds), args.jobs))
    return Parallel(n_jobs=args.jobs)(
        delayed(train_one)(config, seed, args.out, run_name(args, seed), params, args.ntrain) for seed in seeds)


def summarize_fr(fr):
    """ Median / IQR of every FR metric for targets and non-targets """
    summary = {}
    for role, group in fr.groupby("role", sort=True):
        summary[role] = {metric: summarize(group[metric]) for metric in ("recall", "fp_per_million", "precision", "f1")}
    return summary


def cmd_eval(args, config):
    run_dir = _run_dir(args)
    config, world, model, _ = load_run(run_dir)
    projector = get_projector(config, args.lsh)
    print("Calibrating {} on validation...".format(args.threshold))
    threshold = threshold_for_spec(icd_pairs(model, world, "val", projector), args.threshold)
    icd, fr = evaluate_test(model, world, threshold, projector)

    stem = os.path.join(run_dir, "reports", "eval_{{}}_{}{}".format(args.threshold, _suffix(args)))
    written = []
    if args.task in ("icd", "both"):
        written += write_report(icd, stem.format("icd"))
        print("ICD | muAP: {:.4f} | precision: {:.4f} | recall: {:.4f} | T: {:.4f}"
              .format(icd["mu_ap"], icd["precision"], icd["recall"], threshold))
    if args.task in ("fr", "both"):
        fr.to_csv(stem.format("fr") + "_individuals.csv", index=False)
        summary = summarize_fr(fr)
        written += write_report(summary, stem.format("fr"))
        for role, metrics in summary.items():
            print("FR {} | median recall: {:.4f} | median F1: {:.4f}"
                  .format(role, metrics["recall"]["median"], metrics["f1"]["median"]))
    return written


def cmd_calibrate(args, config):
    run_dir = _run_dir(args)
    config, world, model, _ = load_run(run_dir)
    thresholds = calibrate_thresholds(model, world, get_projector(config, args.lsh))
    path = write_json(os.path.join(run_dir, "reports", "thresholds{}.json".format(_suffix(args))), thresholds)
    print("Thresholds: {}".format(thresholds))
    return path


def benign_corpus(world):
    """ Test queries without a copy in the references plus all test non-target images """
    distractors = [i for i in range(world.queries_test.shape[0]) if i not in world.matches_test]
    faces = [world.faces[i] for i in world.nontarget_test]
    return torch.cat([world.queries_test[distractors]] + faces)


def template_sweep(model, world, ks, threshold, css, projector=None):
    """ Target recognition and false positives with k templates in place of the training images
    """
    query_ids, _ = fr_individuals(world, "test")
    q_hashes, _ = compute_hashes(model, world.images(query_ids), projector)
    owners = world.identity_of(query_ids).numpy()
    corpus = benign_corpus(world)
    db_r = build_database(model, world.references, use_lsh=projector is not None, projector=projector)
    fp_r = fp_study(model, corpus, db_r, threshold, projector).fp_per_million

    rows = []
    for k_index, target in enumerate(world.targets):
        train_embeddings = embed(model, world.target_images("train", k_index))
        for k in ks:
            if k > train_embeddings.shape[0]:
                raise ConfigError("k={} exceeds the {} target training images".format(k, train_embeddings.shape[0]))
            templates = reduce_templates(train_embeddings, k, seed=css.kmeans_seed, renormalize=css.renormalize)
            db_t = template_database(templates, projector)
            flagged = match_hashes(q_hashes, db_t, threshold).numpy()
            report = fr_metrics(pd.DataFrame({"is_target": owners == target, "flagged": flagged}))
            row = {"target": target, "k": k, "inertia": templates.inertia,
                   "fp_per_million_R": fp_r,
                   "fp_per_million_Rd": fp_study(model, corpus, db_r.extend(db_t), threshold, projector).fp_per_million}
            row.update(report.as_dict())
            rows.append(row)
    return pd.DataFrame(rows)


def forge_trial(model, world, config, threshold, seed, target=0):
    """ Pick a cover item from a seeded pool and forge it against the k=1 template """
    corpus = benign_corpus(world)
    generator = torch.Generator().manual_seed(seed)
    pool = corpus[torch.randperm(corpus.shape[0], generator=generator)[:config.css.cover_pool]]
    h_t = reduce_templates(embed(model, world.target_images("train", target)), 1).centroids[0]
    index, cover_distance = select_cover(model, pool, h_t)
    result = forge_collision(model, pool[index], h_t, iterations=config.css.forge_iterations,
                             lam_vis=config.css.lam_vis, step_size=config.css.forge_step)
    return {"seed": seed, "target": target, "cover_distance": cover_distance, "distance": result.distance,
            "ratio": result.ratio, "best_iteration": result.best_iteration,
            "flagged": bool(result.distance < threshold)}, result.losses


def cmd_simulate(args, config):
    run_dir = _run_dir(args)
    config, world, model, _ = load_run(run_dir)
    ks = parse_int_list(args.templates, "templates") if args.templates else list(config.css.k_sweep)
    reports = os.path.join(run_dir, "reports")
    threshold = threshold_for_spec(icd_pairs(model, world, "val"), args.threshold)

    print("Running template sweep over k = {}...".format(ks))
    sweep = template_sweep(model, world, ks, threshold, config.css)
    sweep.insert(0, "hash", "continuous")
    split = reference_split_fp(model, world.references, threshold, config.css.split_fraction,
                               seed=config.css.kmeans_seed)
    test_icd, _ = evaluate_test(model, world, threshold)
    summary = {"threshold": threshold, "mu_ap_test": test_icd["mu_ap"],
               "reference_split_fp_per_million": split.fp_per_million}

    if args.lsh:
        projector = get_projector(config, True)
        t_lsh = threshold_for_spec(icd_pairs(model, world, "val", projector), args.threshold)
        lsh_sweep = template_sweep(model, world, ks, t_lsh, config.css, projector)
        lsh_sweep.insert(0, "hash", "lsh")
        sweep = pd.concat([sweep, lsh_sweep], ignore_index=True)
        lsh_icd, _ = evaluate_test(model, world, t_lsh, projector)
        summary.update({"threshold_lsh": t_lsh, "mu_ap_test_lsh": lsh_icd["mu_ap"]})

    if args.forge:
        print("Forging collisions against the k=1 template...")
        trials = []
        for k_index in range(len(world.targets)):
            trial, losses = forge_trial(model, world, config, threshold, args.seed, k_index)
            trials.append(trial)
            pd.DataFrame({"loss": losses}).to_csv(os.path.join(reports, "forge_losses_target{}.csv".format(k_index)),
                                                  index_label="iteration")
        summary["forge"] = trials

    sweep.to_csv(os.path.join(reports, "simulate_templates.csv"), index=False)
    return write_report(summary, os.path.join(reports, "simulate_summary"))


def cmd_forge(args, config):
    run_dir = _run_dir(args)
    config, world, model, _ = load_run(run_dir)
    seeds = parse_int_list(args.seeds, "seeds") if args.seeds else [args.seed]
    threshold = threshold_for_spec(icd_pairs(model, world, "val"), args.threshold)
    rows = []
    for seed in seeds:
        trial, _ = forge_trial(model, world, config, threshold, seed)
        rows.append(trial)
        print("Seed {} | distance: {:.4f} | ratio: {:.4f} | flagged: {}"
              .format(seed, trial["distance"], trial["ratio"], trial["flagged"]))
    df = pd.DataFrame(rows)
    df.to_csv(os.path.join(run_dir, "reports", "forge.csv"), index=False)
    summary = {"threshold": threshold, "n_seeds": len(rows), "n_flagged": int(df["flagged"].sum()),
               "max_ratio": float(df["ratio"].max())}
    return write_report(summary, os.path.join(run_dir, "reports", "forge_summary"))


def cmd_clean(args, config):
    if not args.items or not args.oracle:
        raise ConfigError("clean needs --items and --oracle")
    items = load_items(args.items)
    faces, copies = load_oracle(args.oracle)
    mislabeled, duplicates = clean_items(items, faces, copies, config.cleaning.t_mis, config.cleaning.t_dup)
    out_dir = os.path.join(args.out, args.run or "clean")
    write_id_list(os.path.join(out_dir, "mislabeled.txt"), mislabeled)
    write_id_list(os.path.join(out_dir, "duplicates.txt"), duplicates)
    print("Excluded {} mislabeled and {} duplicate items".format(len(mislabeled), len(duplicates)))
    return out_dir


def cmd_activations(args, config):
    run_dir = _run_dir(args)
    config, world, model, _ = load_run(run_dir)
    primary = world.queries_test
    faces = torch.cat([world.faces[i] for i in world.nontarget_test])
    reports = os.path.join(run_dir, "reports")
    export_heatmap(activation_stats(model, primary), os.path.join(reports, "activations_primary.csv"))
    export_heatmap(activation_stats(model, faces), os.path.join(reports, "activations_nontarget.csv"))
    distance = compare_activations(model, primary, faces)
    print("Cosine distance between mean activations: {:.4f}".format(distance))
    return write_report({"cosine_distance": distance}, os.path.join(reports, "activations"))


C_HANDLERS = {"train": cmd_train, "eval": cmd_eval, "simulate": cmd_simulate, "clean": cmd_clean,
              "forge": cmd_forge, "calibrate": cmd_calibrate, "activations": cmd_activations}


def main(argv=None):
    """
    Parse the command line, load the config and run one command
    @return Exit code: 0 success, 2 usage or config error, 3 numerical failure
    """
    print("Setting up...")
    args = argParser(argv)
    try:
        config = apply_overrides(load_config(args.config), args)
        C_HANDLERS[args.command](args, config)
    except (ConfigError, FileNotFoundError) as e:
        print("error: {}".format(e), file=sys.stderr)
        return C_EXIT_USAGE
    except (NumericalError, UnachievablePrecisionError) as e:
        print("numerical failure: {}".format(e), file=sys.stderr)
        return C_EXIT_NUMERICAL
    return C_EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
