"""Experiment driver: one subcommand per pipeline stage.

Every stage derives all randomness from the config's seed through fixed
namespaces (data, partition, splits, then per-stage, per-client streams),
so any two runs of the same subcommand with the same document produce
byte-identical CSV artifacts. Stages communicate through files in one
output directory: architecture search writes genome files, hyperparameter
search writes chosen-config files, training writes round logs and model
snapshots, and the attack probe consumes those snapshots.

Exit codes: 0 success, 2 configuration or input error, 3 infeasibility
(no admissible candidate under the privacy budget), 4 runtime failure.
"""

from __future__ import annotations

import json
import logging
import math
import os
import sys
import traceback

import click
import numpy as np

from .analysis import (
    AttackReport,
    ConvergenceConstants,
    DecoderConfig,
    check_eta_w,
    corollary1_rhs,
    corollary2_avg_grad_bound,
    inversion_attack,
    max_eta_theta,
    theorem1_rhs,
    write_attack_csv,
)
from .config import ExperimentConfig, RunManifest, load_config
from .data import (
    Dataset,
    load_cifar_binary,
    partition_class_subset,
    partition_dirichlet,
    split_nas_subsets,
    synth_dataset,
)
from .errors import (
    BudgetExhaustedError,
    ConfigError,
    FedNasError,
    InfeasibleError,
    ParseError,
)
from .federation import ClientState, FederationPlan, run_rounds
from .ga import TrainingEvaluator, run_ga
from .hpo import DPTrialEvaluator, HyperConfig, SearchDomain, TrialPlan, run_bo
from .privacy import calibrate_sigma
from .space import (
    Genome,
    genome_from_string,
    load_model_npz,
    save_model_npz,
)

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_RUNTIME = 4

# Fixed fallback architecture for runs that skip the search phase.
DEFAULT_GENOME = "C3x32-C3x64-Pavg"

# seed-namespace tags: (seed, tag, ...) keeps every stage's stream disjoint
_TAG_DATA, _TAG_PART, _TAG_SPLIT = 0, 1, 2
_TAG_NAS, _TAG_HPO, _TAG_TRAIN, _TAG_ATTACK = 10, 20, 30, 40


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(body) -> None:
    """Map exception families onto the exit-code contract."""
    try:
        body()
    except (ConfigError, ParseError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (InfeasibleError, BudgetExhaustedError) as exc:
        _fail(EXIT_INFEASIBLE, str(exc))
    except FedNasError as exc:
        _fail(EXIT_RUNTIME, str(exc))
    except OSError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except Exception as exc:  # noqa: BLE001 - contract: nonzero, surfaced
        traceback.print_exc()
        _fail(EXIT_RUNTIME, f"unexpected failure: {exc!r}")


def _prepare(config: ExperimentConfig):
    """Dataset, partition plan, and per-client NAS splits — identical in
    every subcommand for a given document."""
    ds_spec = config.dataset
    if ds_spec.kind == "synth":
        dataset = synth_dataset(ds_spec.num_classes, ds_spec.per_class,
                                ds_spec.image_side, ds_spec.separation,
                                np.random.default_rng((config.seed, _TAG_DATA)))
    else:
        dataset = load_cifar_binary(ds_spec.path)
        if ds_spec.coarse:
            if dataset.coarse_labels is None:
                raise ConfigError(
                    f"{ds_spec.path}: no coarse labels in this file")
            dataset = Dataset(dataset.images, dataset.coarse_labels,
                              int(dataset.coarse_labels.max()) + 1)
        if dataset.num_classes != ds_spec.num_classes:
            raise ConfigError(
                f"dataset.num_classes={ds_spec.num_classes} but "
                f"{ds_spec.path} holds {dataset.num_classes} classes")
    if config.space.num_classes != dataset.num_classes:
        raise ConfigError(
            f"space.num_classes={config.space.num_classes} does not match "
            f"the dataset's {dataset.num_classes}")
    if tuple(config.space.input_shape) != dataset.images.shape[1:]:
        raise ConfigError(
            f"space.input_shape={config.space.input_shape} does not match "
            f"images of shape {dataset.images.shape[1:]}")
    part = config.partition
    prng = np.random.default_rng((config.seed, _TAG_PART))
    if part.scheme == "dirichlet":
        plan = partition_dirichlet(dataset.labels, config.clients.count,
                                   part.alpha, prng)
    else:
        plan = partition_class_subset(dataset.labels, config.clients.count,
                                      part.classes_per_client, part.skew, prng)
    splits = [
        split_nas_subsets(plan.client_indices[k], dataset.labels,
                          np.random.default_rng((config.seed, _TAG_SPLIT, k)))
        for k in range(config.clients.count)
    ]
    return dataset, plan, splits


def _train_indices(split) -> np.ndarray:
    """Federated-training samples: the post-search remainder when the shard
    was large enough to leave one, otherwise the search-training subset."""
    return split.fed_remainder if len(split.fed_remainder) else split.nas_train


def _genome_path(out_dir: str, k: int) -> str:
    return os.path.join(out_dir, f"genome_client{k}.txt")


def _hyper_path(out_dir: str, k: int) -> str:
    return os.path.join(out_dir, f"hyper_client{k}.json")


def _model_path(out_dir: str, k: int) -> str:
    return os.path.join(out_dir, f"model_client{k}.npz")


def _read_genomes(out_dir: str, count: int) -> list[Genome]:
    genomes = []
    for k in range(count):
        path = _genome_path(out_dir, k)
        if not os.path.exists(path):
            raise ConfigError(
                f"missing genome file {path}; run the nas stage first or "
                "pass --no-nas")
        with open(path) as fh:
            genomes.append(genome_from_string(fh.read().strip()))
    return genomes


def _read_hyper(out_dir: str, k: int) -> HyperConfig | None:
    path = _hyper_path(out_dir, k)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        doc = json.load(fh)
    return HyperConfig(doc["eta"], int(doc["batch_size"]), doc["clip"],
                       doc["sigma"])


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="debug-level logging")
@click.option("--threads", type=int, default=1, show_default=True,
              help="worker threads; anything above 1 is advisory only — "
                   "execution stays sequential, which keeps runs bit-exact")
def main(verbose: bool, threads: int) -> None:
    """Federated architecture-search laboratory."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if threads != 1:
        logger.info("threads=%d requested; running sequentially for "
                    "reproducibility", threads)


def _common_options(fn):
    fn = click.option("--config", "-c", "config_path", required=True,
                      type=click.Path(), help="experiment document")(fn)
    fn = click.option("--out", "out_override", default=None,
                      type=click.Path(), help="output directory override")(fn)
    return fn


@main.command()
@_common_options
def nas(config_path: str, out_override: str | None) -> None:
    """Per-client architecture search; writes genome files and trace CSVs."""

    def body() -> None:
        config = load_config(config_path)
        out_dir = config.resolve_output_dir(out_override)
        os.makedirs(out_dir, exist_ok=True)
        manifest = RunManifest.start("nas", config)
        manifest_path = os.path.join(out_dir, "manifest_nas.json")
        manifest.write(manifest_path)
        dataset, _, splits = _prepare(config)
        artifacts = {}
        for k in range(config.clients.count):
            split = splits[k]
            evaluator = TrainingEvaluator(
                config.space,
                dataset.images[split.nas_train], dataset.labels[split.nas_train],
                dataset.images[split.nas_val], dataset.labels[split.nas_val],
                epochs=config.ga.eval_epochs, eta=config.train.eta,
                batch_size=config.train.batch_size)
            trace_path = os.path.join(out_dir, f"ga_client{k}.csv")
            result = run_ga(config.ga, config.space, evaluator,
                            np.random.default_rng((config.seed, _TAG_NAS, k)),
                            csv_path=trace_path)
            path = _genome_path(out_dir, k)
            with open(path, "w") as fh:
                fh.write(str(result.best_genome) + "\n")
            click.echo(f"client {k}: {result.best_genome} "
                       f"(fitness {result.best_fitness:.4f})")
            artifacts[f"genome_client{k}"] = path
            artifacts[f"ga_trace_client{k}"] = trace_path
        manifest.finalize(artifacts)
        manifest.write(manifest_path)

    _guarded(body)


@main.command()
@_common_options
def hpo(config_path: str, out_override: str | None) -> None:
    """Per-client constrained hyperparameter search under the privacy budget."""

    def body() -> None:
        config = load_config(config_path)
        out_dir = config.resolve_output_dir(out_override)
        os.makedirs(out_dir, exist_ok=True)
        manifest = RunManifest.start("hpo", config)
        manifest_path = os.path.join(out_dir, "manifest_hpo.json")
        manifest.write(manifest_path)
        dataset, _, splits = _prepare(config)
        genomes = _read_genomes(out_dir, config.clients.count)
        plan = TrialPlan(config.bo.trial_epochs)
        artifacts = {}
        for k in range(config.clients.count):
            split = splits[k]
            evaluator = DPTrialEvaluator(
                genomes[k], config.space,
                dataset.images[split.nas_train], dataset.labels[split.nas_train],
                dataset.images[split.nas_val], dataset.labels[split.nas_val],
                plan, seed=(config.seed * 1000 + k) & 0x7FFFFFFF,
                delta=config.clients.delta)
            domain = SearchDomain(
                dataset_size=len(split.nas_train),
                eta_range=config.bo.eta_range, q_range=config.bo.q_range,
                clip_range=config.bo.clip_range,
                sigma_range=config.bo.sigma_range)
            trace_path = os.path.join(out_dir, f"bo_client{k}.csv")
            eps_budget = config.clients.budget_for(k)
            try:
                result = run_bo(
                    evaluator, domain, eps_budget, plan=plan,
                    delta=config.clients.delta, k_init=config.bo.k_init,
                    n_iter=config.bo.n_iter,
                    rng=np.random.default_rng((config.seed, _TAG_HPO, k)),
                    csv_path=trace_path)
            except InfeasibleError as exc:
                raise InfeasibleError(f"client {k}: {exc}") from exc
            best = result.best
            path = _hyper_path(out_dir, k)
            with open(path, "w") as fh:
                json.dump({"eta": best.eta, "batch_size": best.batch_size,
                           "clip": best.clip, "sigma": best.sigma,
                           "predicted": result.best_predicted,
                           "observed": result.best_observed},
                          fh, indent=2, sort_keys=True)
                fh.write("\n")
            click.echo(f"client {k}: eta={best.eta:.4g} B={best.batch_size} "
                       f"C={best.clip:.3g} sigma={best.sigma:.3g} "
                       f"(observed {result.best_observed:.4f})")
            artifacts[f"hyper_client{k}"] = path
            artifacts[f"bo_trace_client{k}"] = trace_path
        manifest.finalize(artifacts)
        manifest.write(manifest_path)

    _guarded(body)


def _resolve_hyper(config: ExperimentConfig, out_dir: str, k: int,
                   m_k: int) -> HyperConfig:
    """Stage-two output if present, else the train-section recipe (with
    noise calibration when sigma is "auto")."""
    chosen = _read_hyper(out_dir, k)
    if chosen is not None:
        return chosen
    t = config.train
    batch = min(t.batch_size, m_k)
    sigma = t.sigma
    if sigma == "auto":
        q = min(batch / m_k, 1.0)
        steps_per_round = math.ceil(t.local_epochs * m_k / batch)
        total = max(1, t.rounds * steps_per_round)
        sigma = calibrate_sigma(q, total, config.clients.budget_for(k),
                                config.clients.delta)
        logger.info("client %d: calibrated sigma=%.4g for %d steps",
                    k, sigma, total)
    return HyperConfig(t.eta, batch, t.clip, float(sigma))


@main.command()
@_common_options
@click.option("--no-nas", is_flag=True,
              help=f"skip genome files and use the fixed {DEFAULT_GENOME}")
@click.option("--local-only", is_flag=True,
              help="disable aggregation/broadcast (isolated local training)")
def train(config_path: str, out_override: str | None, no_nas: bool,
          local_only: bool) -> None:
    """Federated training; writes the round log, summary, and model files."""

    def body() -> None:
        config = load_config(config_path)
        out_dir = config.resolve_output_dir(out_override)
        os.makedirs(out_dir, exist_ok=True)
        manifest = RunManifest.start("train", config)
        manifest_path = os.path.join(out_dir, "manifest_train.json")
        manifest.write(manifest_path)
        dataset, _, splits = _prepare(config)
        if no_nas:
            genomes = [genome_from_string(DEFAULT_GENOME)
                       for _ in range(config.clients.count)]
        else:
            genomes = _read_genomes(out_dir, config.clients.count)
        clients = []
        for k in range(config.clients.count):
            shard = _train_indices(splits[k])
            hyper = _resolve_hyper(config, out_dir, k, len(shard))
            clients.append(ClientState.create(
                k, genomes[k], config.space, hyper, shard,
                splits[k].nas_test, config.clients.budget_for(k),
                np.random.default_rng((config.seed, _TAG_TRAIN, k)),
                delta=config.clients.delta))
        plan = FederationPlan(
            rounds=config.train.rounds,
            local_epochs=config.train.local_epochs,
            participation=config.clients.participation,
            head_epochs=config.train.head_epochs,
            eta_theta=config.train.eta_theta,
            head_batch=config.train.head_batch,
            target_acc=config.train.target_acc,
            aggregate=not local_only)
        rounds_path = os.path.join(out_dir, "rounds.csv")
        summary_path = os.path.join(out_dir, "summary.json")
        reports = run_rounds(plan, clients, dataset,
                             np.random.default_rng((config.seed, _TAG_TRAIN)),
                             csv_path=rounds_path, summary_path=summary_path)
        artifacts = {"rounds": rounds_path, "summary": summary_path}
        for client in clients:
            path = _model_path(out_dir, client.client_id)
            save_model_npz(path, client.model, client.genome, config.space)
            artifacts[f"model_client{client.client_id}"] = path
        manifest.finalize(artifacts)
        manifest.write(manifest_path)
        last = reports[-1]
        click.echo(f"round {last.round_index}: mean acc {last.mean_acc:.4f} "
                   f"(std {last.std_acc:.4f})")

    _guarded(body)


def _parse_model_pair(pair: str) -> tuple[float, str]:
    if "=" not in pair:
        raise ConfigError(
            f"--model needs the form <eps>=<path>, got {pair!r}")
    label, path = pair.split("=", 1)
    label = label.strip().lower()
    try:
        eps = math.inf if label in ("inf", "infinity") else float(label)
    except ValueError:
        raise ConfigError(f"--model: {label!r} is not a number") from None
    if not os.path.exists(path):
        raise ConfigError(f"--model: missing artifact {path}")
    return eps, path


@main.command()
@_common_options
@click.option("--model", "model_pairs", multiple=True, required=True,
              help="<eps>=<model npz> pair; repeat once per privacy setting")
def attack(config_path: str, out_override: str | None,
           model_pairs: tuple[str, ...]) -> None:
    """Inversion probe against trained encoders; one CSV row per (eps, seed)."""

    def body() -> None:
        config = load_config(config_path)
        out_dir = config.resolve_output_dir(out_override)
        os.makedirs(out_dir, exist_ok=True)
        manifest = RunManifest.start("attack", config)
        manifest_path = os.path.join(out_dir, "manifest_attack.json")
        manifest.write(manifest_path)
        pairs = sorted((_parse_model_pair(p) for p in model_pairs),
                       key=lambda item: -item[0])
        dataset, _, _ = _prepare(config)
        spec = config.attack
        n = len(dataset.images)
        arng = np.random.default_rng((config.seed, _TAG_ATTACK))
        order = arng.permutation(n)
        n_aux = int(spec.aux_fraction * n)
        victim_count = min(spec.victim_count, n - n_aux)
        if n_aux < 1 or victim_count < 1:
            raise ConfigError(
                f"dataset of {n} samples cannot supply aux fraction "
                f"{spec.aux_fraction} plus {spec.victim_count} victims")
        aux = dataset.images[order[:n_aux]]
        victims = dataset.images[order[n_aux:n_aux + victim_count]]
        models = []
        for eps, path in pairs:
            model, _, mspace = load_model_npz(path)
            if mspace.input_shape != config.space.input_shape:
                raise ConfigError(
                    f"{path}: encoder expects {mspace.input_shape}, config "
                    f"data is {config.space.input_shape}")
            models.append((eps, model))
        dec_cfg = DecoderConfig(epochs=spec.decoder_epochs,
                                lr=spec.decoder_lr)
        reports: list[AttackReport] = []
        per_seed_ordered = []
        for s in range(spec.seeds):
            seed_reports = []
            for j, (eps, model) in enumerate(models):
                report = inversion_attack(
                    model, aux, victims, dec_cfg,
                    np.random.default_rng((config.seed, _TAG_ATTACK, s, j)),
                    eps_label=eps, seed=s)
                seed_reports.append(report)
            reports.extend(seed_reports)
            mses = [r.mse for r in seed_reports]
            per_seed_ordered.append(
                all(b >= a - 1e-12 for a, b in zip(mses, mses[1:])))
        csv_path = os.path.join(out_dir, "attack.csv")
        write_attack_csv(csv_path, reports)
        summary_path = os.path.join(out_dir, "attack_summary.json")
        if len(models) > 1:
            fraction = sum(per_seed_ordered) / len(per_seed_ordered)
            summary = {
                "eps_order": [f"{eps:g}" for eps, _ in models],
                "seeds": spec.seeds,
                "ordered_seed_fraction": round(fraction, 6),
                "ordering_holds": fraction > 0.5,
            }
            click.echo(
                f"mse ordering (less private -> more reconstructable) holds "
                f"in {sum(per_seed_ordered)}/{spec.seeds} seeds")
        else:
            summary = {"eps_order": [f"{eps:g}" for eps, _ in models],
                       "seeds": spec.seeds, "ordered_seed_fraction": None,
                       "ordering_holds": None,
                       "note": "single privacy setting; ordering check skipped"}
            click.echo("single privacy setting; ordering check skipped")
        with open(summary_path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.finalize({"attack_csv": csv_path,
                           "attack_summary": summary_path})
        manifest.write(manifest_path)

    _guarded(body)


_CONSTANT_FIELDS = ("B_grad", "L", "var_sigma2", "noise_delta", "C", "d",
                    "E", "eta_w", "eta_theta", "alpha_dev", "p", "Delta",
                    "G", "T")


@main.command()
@click.argument("constants_path", type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="write the JSON report here instead of stdout")
@click.option("--t-sweep", "t_sweep", default=None,
              help="comma-separated T values; writes a bound-vs-T CSV "
                   "next to the report")
def bounds(constants_path: str, out_path: str | None,
           t_sweep: str | None) -> None:
    """Evaluate every convergence-bound calculator for one constants file."""

    def body() -> None:
        import yaml

        try:
            with open(constants_path) as fh:
                doc = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(f"constants file not found: {constants_path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{constants_path}: not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{constants_path}: expected a mapping")
        missing = [name for name in _CONSTANT_FIELDS if name not in doc]
        if missing:
            raise ConfigError(
                f"{constants_path}: missing constant(s) {missing}")
        extra = sorted(set(doc) - set(_CONSTANT_FIELDS)
                       - {"loss0", "grad_norm_sq_sum"})
        if extra:
            raise ConfigError(f"{constants_path}: unknown key(s) {extra}")
        kwargs = {}
        for name in _CONSTANT_FIELDS:
            value = doc[name]
            if name in ("d", "E", "T"):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{name} must be an integer, got {value!r}")
                kwargs[name] = value
            else:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{name} must be a number, got {value!r}")
                kwargs[name] = float(value)
        constants = ConvergenceConstants(**kwargs)
        loss0 = float(doc.get("loss0", 1.0))
        gsum = float(doc.get("grad_norm_sq_sum", 1.0))
        report = {
            "inputs": {"loss0": loss0, "grad_norm_sq_sum": gsum},
            "theorem1": theorem1_rhs(constants, loss0, gsum),
            "corollary1": corollary1_rhs(constants, loss0, gsum),
        }
        try:
            report["corollary2"] = {
                "infeasible": False,
                "value": corollary2_avg_grad_bound(constants),
            }
        except InfeasibleError as exc:
            report["corollary2"] = {"infeasible": True, "reason": str(exc)}
        head_bound = max_eta_theta(constants)
        report["max_eta_theta"] = {"value": head_bound.value,
                                   "feasible": head_bound.feasible}
        report["eta_w_check"] = check_eta_w(constants)
        text = json.dumps(report, indent=2, sort_keys=True) + "\n"
        if out_path:
            with open(out_path, "w") as fh:
                fh.write(text)
        else:
            click.echo(text, nl=False)
        if t_sweep is not None:
            if report["corollary2"]["infeasible"]:
                click.echo("T sweep skipped: descent coefficient infeasible",
                           err=True)
            else:
                try:
                    ts = [int(v) for v in t_sweep.split(",") if v.strip()]
                except ValueError:
                    raise ConfigError(
                        f"--t-sweep must be comma-separated integers, got "
                        f"{t_sweep!r}") from None
                if not ts or min(ts) < 1:
                    raise ConfigError("--t-sweep values must be >= 1")
                import csv as _csv
                import dataclasses as _dc
                sweep_path = (os.path.splitext(out_path)[0] + "_tsweep.csv"
                              if out_path else "bounds_tsweep.csv")
                with open(sweep_path, "w", newline="") as fh:
                    writer = _csv.writer(fh, lineterminator="\n")
                    writer.writerow(["T", "bound"])
                    for t_val in ts:
                        value = corollary2_avg_grad_bound(
                            _dc.replace(constants, T=t_val))
                        writer.writerow([t_val, f"{value:.10g}"])
                click.echo(f"T sweep written to {sweep_path}", err=True)

    _guarded(body)


@main.command()
@click.argument("run_dir", type=click.Path())
def report(run_dir: str) -> None:
    """Digest of a finished run directory."""

    def body() -> None:
        if not os.path.isdir(run_dir):
            raise ConfigError(f"not a directory: {run_dir}")
        found = False
        for name in sorted(os.listdir(run_dir)):
            if name.startswith("manifest_") and name.endswith(".json"):
                with open(os.path.join(run_dir, name)) as fh:
                    doc = json.load(fh)
                found = True
                state = "finished" if doc.get("finished") else "IN PROGRESS"
                click.echo(f"{doc['command']}: {state} "
                           f"(config {doc['config_hash']}, seed {doc['seed']})")
        summary_path = os.path.join(run_dir, "summary.json")
        if os.path.exists(summary_path):
            with open(summary_path) as fh:
                summary = json.load(fh)
            found = True
            target = summary.get("rounds_to_target")
            click.echo(f"final mean acc {summary['mean_acc']:.4f} "
                       f"(std {summary['std_acc']:.4f}); "
                       + (f"target reached in round {target}"
                          if target is not None else "target not reached"))
        attack_path = os.path.join(run_dir, "attack_summary.json")
        if os.path.exists(attack_path):
            with open(attack_path) as fh:
                asum = json.load(fh)
            found = True
            click.echo(f"attack ordering holds: {asum['ordering_holds']} "
                       f"over {asum['seeds']} seeds")
        genomes = sorted(name for name in os.listdir(run_dir)
                         if name.startswith("genome_client"))
        for name in genomes:
            with open(os.path.join(run_dir, name)) as fh:
                click.echo(f"{name}: {fh.read().strip()}")
            found = True
        if not found:
            raise ConfigError(f"no run artifacts in {run_dir}")

    _guarded(body)


if __name__ == "__main__":
    main()
