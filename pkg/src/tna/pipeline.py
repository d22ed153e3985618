"""Command-level compositions: each run_* writes its exports and a JSON bundle."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .community import AnnealSchedule, communities_spinglass
from .config import AnalysisConfig, check_paths
from .errors import ConfigError, DataError, FitFailedError, NumericalError
from .export import atomic_write, jsonable, matrix_csv, to_csv, to_dot, to_graphml, to_json
from .graph import (
    TransitionNetwork, betweenness_rw, find_cliques, find_dyads, in_strength, out_strength, subtract,
)
from .inference import bootstrap_edges, centrality_stability, disparity_filter, permutation_compare
from .markov import TransitionModel, estimate, simulate_array, tally
from .mixture import cluster_networks, covariate_inference, select_k
from .sequences import (
    Alphabet, attach_covariates, group_sequences, ingest, load_covariates, merge_units, sessionize,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
Z95 = 1.959963984540054


def digest_of(echo: dict) -> str:
    text = json.dumps(jsonable(echo), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class Run:
    """Output directory plus the bundle under construction."""

    def __init__(self, cfg: AnalysisConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.out_dir)
        self.stamp = cfg.stamp()
        self.files: list[str] = []
        self.bundle: dict = {
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "config": cfg.echo(),
            "config_hash": cfg.digest(),
            "seed": cfg.seed,
            "provenance": {
                "tool": "tna",
                "version": __version__,
                "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            },
        }

    def write(self, name: str, text: str) -> Path:
        self.files.append(name)
        return atomic_write(self.out / name, text)

    def finish(self) -> Path:
        self.bundle["files"] = sorted(self.files)
        return atomic_write(self.out / f"{self.command}_bundle.json", to_json(self.bundle))


def load_sequences(cfg: AnalysisConfig):
    check_paths(cfg, "events", "covariates")
    alphabet = Alphabet(tuple(cfg.input.alphabet)) if cfg.input.alphabet else None
    log_ = ingest(cfg.resolve(cfg.input.events), cfg.schema(), alphabet)
    policy = cfg.policy()
    threshold = policy.threshold(log_)
    seqs = sessionize(log_, threshold)
    if cfg.input.covariates:
        table = load_covariates(
            cfg.resolve(cfg.input.covariates),
            cfg.input.covariate_unit or cfg.schema().unit,
            cfg.input.covariate_columns,
            cfg.schema().delimiter,
        )
        seqs = attach_covariates(seqs, table)
    if cfg.input.tally_scope == "unit":
        seqs = merge_units(seqs)
    info = {
        "n_events": len(log_),
        "n_units": len(log_.units()),
        "n_sequences": len(seqs),
        "session_threshold_seconds": threshold,
        "sessionization": policy.mode,
        "tally_scope": cfg.input.tally_scope,
    }
    return log_.alphabet, seqs, info


def _model_section(model: TransitionModel) -> dict:
    d = model.to_dict()
    if model.counts is not None:
        d["counts"] = model.counts.counts
        d["initial_counts"] = model.counts.initial_counts
        d["n_transitions"] = model.counts.n_transitions
        d["n_sequences"] = model.counts.n_sequences
    return d


def _estimate(run: Run):
    alphabet, seqs, info = load_sequences(run.cfg)
    counts = tally(seqs, alphabet)
    model = estimate(counts, run.cfg.scaling)
    run.bundle["data"] = info
    run.bundle["model"] = _model_section(model)
    return alphabet, seqs, model


def run_estimate(cfg: AnalysisConfig) -> Path:
    run = Run(cfg, "estimate")
    _, _, model = _estimate(run)
    run.write("matrix.csv", matrix_csv(model.labels, model.matrix, run.stamp))
    run.write("initial.csv", to_csv(["state", "initial"], zip(model.labels, model.initial), run.stamp))
    run.write("network.dot", to_dot(model.labels, model.matrix, initial=model.initial, stamp=run.stamp))
    run.write("network.graphml", to_graphml(model.labels, model.matrix, initial=model.initial, stamp=run.stamp))
    return run.finish()


def _schedule(cfg: AnalysisConfig) -> AnnealSchedule:
    c = cfg.communities
    return AnnealSchedule(c.t_start, c.factor, c.sweeps, c.t_stop)


def network_analysis(model: TransitionModel, cfg: AnalysisConfig, seed: int) -> dict:
    """Centralities, patterns and communities of one network."""
    net = TransitionNetwork(model)
    pc = cfg.patterns
    out = {
        "centralities": {
            "in_strength": in_strength(net),
            "out_strength": out_strength(net),
        },
        "metadata": {
            "self_loops_in_strength": "excluded",
            "dyad_threshold": pc.dyad_threshold,
            "clique_threshold": pc.clique_threshold,
            "clique_size": pc.clique_size,
            "comparison": ">=",
        },
    }
    if model.scaling == "stochastic":
        bt = betweenness_rw(net)
        out["centralities"]["betweenness"] = bt.raw
        out["centralities"]["betweenness_normalized"] = bt.normalized
        out["metadata"]["betweenness_pairs"] = bt.n_pairs
    out["dyads"] = [
        {"a": d.a, "b": d.b, "w_ab": d.w_ab, "w_ba": d.w_ba} for d in find_dyads(net, pc.dyad_threshold)
    ]
    out["cliques"] = [
        {"nodes": list(c.nodes), "min_weight": c.min_weight,
         "weights": {f"{a}->{b}": w for (a, b), w in c.weights.items()}}
        for c in find_cliques(net, pc.clique_size, pc.clique_threshold)
    ]
    try:
        comm = communities_spinglass(net, cfg.communities.gamma, seed, _schedule(cfg))
        out["communities"] = {
            "membership": comm.membership,
            "n_communities": comm.n_communities,
            "hamiltonian": comm.hamiltonian,
            "modularity": comm.modularity,
            "gamma": comm.gamma,
            "seed": seed,
            "sweeps_per_temperature": comm.n_sweeps,
        }
    except DataError as exc:
        out["communities"] = {"error": str(exc)}
    return out


def _centrality_rows(analysis: dict, prefix=()):
    for measure, values in analysis["centralities"].items():
        for state, v in values.items():
            yield [*prefix, measure, state, v]


def _write_analysis(run: Run, model: TransitionModel, analysis: dict, tag: str = "") -> None:
    st = run.stamp
    run.write(f"centralities{tag}.csv", to_csv(["measure", "state", "value"], _centrality_rows(analysis), st))
    run.write(f"dyads{tag}.csv", to_csv(
        ["a", "b", "w_ab", "w_ba", "threshold"],
        ([d["a"], d["b"], d["w_ab"], d["w_ba"], analysis["metadata"]["dyad_threshold"]] for d in analysis["dyads"]),
        st))
    run.write(f"cliques{tag}.csv", to_csv(
        ["nodes", "min_weight", "threshold"],
        ([";".join(c["nodes"]), c["min_weight"], analysis["metadata"]["clique_threshold"]] for c in analysis["cliques"]),
        st))
    comm = analysis["communities"].get("membership")
    if comm is not None:
        run.write(f"communities{tag}.csv", to_csv(["state", "community"], comm.items(), st))
    run.write(f"network{tag}.dot", to_dot(model.labels, model.matrix, initial=model.initial,
                                          stamp=st, communities=comm))


def run_analyze(cfg: AnalysisConfig, bundle_path=None) -> Path:
    run = Run(cfg, "analyze")
    if bundle_path is not None:
        p = Path(bundle_path)
        if not p.exists():
            raise ConfigError(f"bundle not found: {p}")
        src = json.loads(p.read_text(encoding="utf-8"))
        if "model" not in src:
            raise DataError(f"{p} holds no model")
        model = TransitionModel.from_dict(src["model"])
        run.bundle["model"] = src["model"]
        run.bundle["source_bundle"] = {"path": p.name, "config_hash": src.get("config_hash")}
    else:
        _, _, model = _estimate(run)
    analysis = network_analysis(model, cfg, cfg.task_seed("communities"))
    run.bundle["analysis"] = analysis
    _write_analysis(run, model, analysis)
    return run.finish()


def run_cluster(cfg: AnalysisConfig) -> Path:
    run = Run(cfg, "cluster")
    alphabet, seqs, _ = _estimate(run)
    mc = cfg.mixture
    names = mc.covariates
    if names is None and cfg.input.covariates:
        names = sorted(seqs[0].covariates)
    best, table = select_k(seqs, alphabet, mc.k_range, names or None, restarts=mc.restarts,
                           seed=cfg.task_seed("mixture"), tol=mc.tol, max_iter=mc.max_iter,
                           n_jobs=cfg.threads)
    labels = best.cluster_labels()
    st = run.stamp
    run.write("bic_table.csv", to_csv(
        ["K", "status", "bic", "log_likelihood", "n_parameters", "restarts_at_best"],
        ([r.K, r.status, r.bic, r.log_likelihood, r.n_parameters, r.n_restarts_converged_to_best] for r in table),
        st))
    mix = {
        "K": best.K,
        "labels": labels,
        "log_likelihood": best.log_likelihood,
        "bic": best.bic,
        "n_parameters": best.n_parameters,
        "n_sequences": best.n_sequences,
        "n_restarts": best.n_restarts,
        "n_restarts_converged_to_best": best.n_restarts_converged_to_best,
        "n_degenerate": best.n_degenerate,
        "converged": best.converged,
        "trace_summary": {"iterations": len(best.trace), "first": best.trace[0], "last": best.trace[-1]},
        "bic_table": [vars(r) for r in table],
        "covariate_names": list(best.model.covariate_names),
        "beta": best.model.beta,
        "components": [_model_section(c) for c in best.model.components],
        "posteriors": best.posteriors,
        "assignments": [labels[k] for k in best.assignments],
        "sequence_ids": [[s.unit_id, s.session_id] for s in seqs],
    }
    if best.model.covariate_names and best.K >= 2:
        try:
            rows = covariate_inference(best)
        except NumericalError as exc:
            mix["covariate_inference"] = {"error": str(exc)}
        else:
            mix["covariate_inference"] = [vars(r) for r in rows]
            run.write("covariates.csv", to_csv(
                ["Cluster", "Variable", "Estimate", "SE", "CI", "ci_low", "ci_high", "t", "p"],
                ([r.cluster, r.variable, r.estimate, r.se, f"[{r.ci_low:.2f};{r.ci_high:.2f}]",
                  r.ci_low, r.ci_high, r.t, r.p] for r in rows),
                st))
    run.write("posteriors.csv", to_csv(
        ["unit", "session", *labels, "cluster"],
        ([s.unit_id, s.session_id, *best.posteriors[i], labels[best.assignments[i]]] for i, s in enumerate(seqs)),
        st))
    per_cluster = {}
    bar_rows = []
    for k, net in enumerate(cluster_networks(best)):
        analysis = network_analysis(net.model, cfg, cfg.task_seed(f"communities/{k}"))
        per_cluster[labels[k]] = analysis
        bar_rows.extend(_centrality_rows(analysis, (labels[k],)))
        run.write(f"cluster_{k + 1}.dot", to_dot(net.labels, net.weights, initial=net.model.initial,
                                                 name=labels[k], stamp=st,
                                                 communities=analysis["communities"].get("membership")))
    run.write("cluster_centralities.csv", to_csv(["cluster", "measure", "state", "value"], bar_rows, st))
    mix["cluster_analysis"] = per_cluster
    run.bundle["mixture"] = mix
    return run.finish()


def _bootstrap_section(res) -> dict:
    return {
        "B": res.B, "threshold": res.threshold, "alpha": res.alpha, "rule": res.rule,
        "edges": [vars(e) for e in res.edges],
        "n_retained": len(res.retained()), "n_dropped": len(res.dropped()),
    }


def run_validate(cfg: AnalysisConfig) -> Path:
    run = Run(cfg, "validate")
    alphabet, seqs, model = _estimate(run)
    vc = cfg.validation
    st = run.stamp
    res = bootstrap_edges(seqs, alphabet, vc.bootstrap_b, vc.threshold, vc.alpha,
                          cfg.task_seed("bootstrap"), vc.rule)
    labels = alphabet.labels
    run.write("bootstrap_edges.csv", to_csv(
        ["from", "to", "weight", "mean", "sd", "ci_low", "ci_high", "p_value", "retained"],
        ([e.source, e.target, e.weight, e.mean, e.sd, e.ci_low, e.ci_high, e.p_value, e.retained] for e in res.edges),
        st))
    run.write("bootstrap_retained.dot", to_dot(labels, res.retained_matrix, initial=model.initial,
                                               name="retained", stamp=st))
    run.write("bootstrap_dropped.dot", to_dot(labels, res.dropped_matrix, name="dropped", stamp=st))
    section = {"bootstrap": _bootstrap_section(res)}

    stoch = model if model.scaling == "stochastic" else estimate(model.counts)
    disp = disparity_filter(stoch, vc.disparity_significance)
    drows = [[labels[i], labels[j], float(stoch.matrix[i, j]), float(disp.alpha_out[i, j]),
              float(disp.alpha_in[i, j]), float(disp.alpha[i, j]), bool(disp.retained[i, j])]
             for i, j in zip(*np.nonzero(stoch.matrix > 0))]
    run.write("disparity.csv", to_csv(
        ["from", "to", "weight", "alpha_out", "alpha_in", "alpha", "retained"], drows, st))
    section["disparity"] = {"significance": disp.significance, "edges": drows}

    stab = {}
    srows = []
    for measure in vc.measures:
        try:
            r = centrality_stability(seqs, alphabet, measure, vc.drop_props, vc.n_reps,
                                     cfg.task_seed(f"stability/{measure}"))
        except DataError as exc:
            stab[measure] = {"error": str(exc)}
            continue
        stab[measure] = {"cs_coefficient": r.cs_coefficient,
                         "mean_correlation": {f"{p:g}": v for p, v in r.mean_correlation.items()}}
        srows.extend([measure, p, v, r.cs_coefficient] for p, v in r.mean_correlation.items())
    run.write("stability.csv", to_csv(["measure", "drop_proportion", "mean_correlation", "cs_coefficient"],
                                      srows, st))
    section["stability"] = stab

    if cfg.compare.group_column:
        section["permutation"] = _permutation(run, cfg, alphabet, seqs, cfg.compare.group_column)[1]
    run.bundle["validation"] = section
    return run.finish()


def _pick_groups(cfg: AnalysisConfig, seqs, column: str):
    groups = group_sequences(seqs, column)
    names = cfg.compare.groups or sorted(groups)
    if len(names) != 2:
        raise ConfigError(
            f"group column {column!r} has values {sorted(groups)}; set [compare] groups to pick two"
        )
    for g in names:
        if g not in groups:
            raise DataError(f"group {g!r} has no sequences")
    return names, groups[names[0]], groups[names[1]]


def _permutation(run: Run, cfg: AnalysisConfig, alphabet, seqs, column):
    names, a, b = _pick_groups(cfg, seqs, column)
    res = permutation_compare(a, b, alphabet, cfg.validation.n_perm, cfg.task_seed("permutation"))
    run.write("permutation.csv", to_csv(
        ["from", "to", f"weight_{names[0]}", f"weight_{names[1]}", "difference", "p_value"],
        ([e.source, e.target, e.weight_a, e.weight_b, e.difference, e.p_value] for e in res.edges),
        run.stamp))
    section = {"groups": names, "n_perm": res.n_perm, "sizes": [len(a), len(b)],
               "edges": [vars(e) for e in res.edges]}
    return (names, a, b), section


def run_compare(cfg: AnalysisConfig, group_column: str | None = None) -> Path:
    run = Run(cfg, "compare")
    column = group_column or cfg.compare.group_column
    if not column:
        raise ConfigError("compare needs a group column (--group-column or [compare] group_column)")
    alphabet, seqs, _ = _estimate(run)
    (names, a, b), perm = _permutation(run, cfg, alphabet, seqs, column)
    ma = estimate(tally(a, alphabet), cfg.scaling)
    mb = estimate(tally(b, alphabet), cfg.scaling)
    sub = subtract(ma, mb, tuple(names))
    run.write("subtraction.dot", to_dot(alphabet.labels, sub.delta, name=f"{names[0]} - {names[1]}",
                                        signed=True, stamp=run.stamp))
    run.write("subtraction.csv", matrix_csv(alphabet.labels, sub.delta, run.stamp))
    run.bundle["comparison"] = {"group_column": column, "subtraction": sub.to_dict(), "permutation": perm,
                                "models": {names[0]: _model_section(ma), names[1]: _model_section(mb)}}
    return run.finish()


def run_simulate(cfg: AnalysisConfig) -> Path:
    """Write a synthetic event log, covariates and the generating truth."""
    sc = cfg.simulate
    if sc.components:
        comps = sc.components
    elif sc.matrix is not None:
        comps = [{"initial": sc.initial, "matrix": sc.matrix, "weight": 1.0}]
    else:
        raise ConfigError("[simulate] needs either matrix or components")
    n_states = len(comps[0]["matrix"])
    labels = sc.labels or [f"S{i + 1}" for i in range(n_states)]
    alphabet = Alphabet(tuple(labels))
    models = []
    for c in comps:
        init = c.get("initial") or [1.0 / n_states] * n_states
        models.append(TransitionModel(alphabet, np.asarray(init, float), np.asarray(c["matrix"], float)))
    weights = np.asarray([float(c.get("weight", 1.0)) for c in comps])
    weights = weights / weights.sum()
    rng = np.random.default_rng(cfg.task_seed("simulate"))
    start = datetime.fromisoformat(sc.start).replace(tzinfo=timezone.utc).timestamp()

    rows, truth_sessions, cov_rows = [], [], []
    for u in range(sc.n_units):
        unit = f"U{u + 1:03d}"
        x = round(float(rng.normal()), 6)
        cov_rows.append([unit, x, u % 2])
        logits = np.log(weights) + sc.covariate_effect * x * np.arange(len(models))
        prior = np.exp(logits - logits.max())
        prior /= prior.sum()
        t = start
        for s in range(sc.sessions_per_unit):
            k = int(rng.choice(len(models), p=prior))
            states, lengths = simulate_array(models[k], 1, sc.session_length, rng)
            truth_sessions.append({"unit": unit, "session": s, "component": k})
            for x in states[0, :lengths[0]]:
                actor = f"{unit}-A{int(rng.integers(sc.actors_per_unit)) + 1}"
                stamp = datetime.fromtimestamp(t, timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")
                rows.append([unit, actor, stamp, labels[int(x)]])
                t += sc.step_seconds
            t += sc.session_gap_seconds
    out = Path(cfg.out_dir)
    atomic_write(out / sc.events_file, to_csv(["unit", "actor", "timestamp", "code"], rows))
    atomic_write(out / sc.covariates_file, to_csv(["unit", "x", "group"], cov_rows))
    truth = {
        "labels": labels,
        "weights": weights,
        "covariate_effect": sc.covariate_effect,
        "components": [m.to_dict() for m in models],
        "sessions": truth_sessions,
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
    }
    return atomic_write(out / sc.truth_file, to_json(truth))


def _check_stochastic(name, matrix, problems, tol=1e-9):
    M = np.asarray(matrix, dtype=float)
    if np.any(M < -tol) or np.any(M > 1 + tol):
        problems.append(f"{name}: entries outside [0, 1]")
    rows = M.sum(axis=1)
    bad = [i for i, r in enumerate(rows) if r != 0 and abs(r - 1) > tol]
    if bad:
        problems.append(f"{name}: rows {bad} do not sum to 1")


def verify_bundle(path) -> list[str]:
    """Recheck a bundle's internal consistency; returns a list of problems."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"bundle not found: {p}")
    b = json.loads(p.read_text(encoding="utf-8"))
    problems: list[str] = []
    for key in ("schema_version", "config", "config_hash", "seed"):
        if key not in b:
            problems.append(f"missing key {key!r}")
    if problems:
        return problems
    if b["schema_version"] != SCHEMA_VERSION:
        problems.append(f"unsupported schema_version {b['schema_version']}")
    if digest_of(b["config"]) != b["config_hash"]:
        problems.append("config_hash does not match the config echo")
    if b["config"].get("seed") != b["seed"]:
        problems.append("seed differs from the config echo")

    model = b.get("model")
    if model and model.get("scaling") == "stochastic":
        _check_stochastic("model", model["matrix"], problems)
        if abs(sum(model["initial"]) - 1) > 1e-9:
            problems.append("model: initial probabilities do not sum to 1")
    if model and "counts" in model:
        if int(np.sum(model["counts"])) != model["n_transitions"]:
            problems.append("model: counts do not add up to n_transitions")

    mix = b.get("mixture")
    if mix:
        for k, comp in enumerate(mix["components"]):
            _check_stochastic(f"component {k + 1}", comp["matrix"], problems)
        post = np.asarray(mix["posteriors"], dtype=float)
        if np.any(np.abs(post.sum(axis=1) - 1) > 1e-10):
            problems.append("posteriors do not sum to 1")
        bic = -2 * mix["log_likelihood"] + mix["n_parameters"] * math.log(mix["n_sequences"])
        if abs(bic - mix["bic"]) > 1e-6 * max(1.0, abs(bic)):
            problems.append("BIC inconsistent with log-likelihood and parameter count")
        rows = mix.get("covariate_inference")
        if isinstance(rows, list):
            for r in rows:
                lo, hi = r["estimate"] - Z95 * r["se"], r["estimate"] + Z95 * r["se"]
                if not (math.isclose(r["ci_low"], lo, rel_tol=1e-9, abs_tol=1e-12)
                        and math.isclose(r["ci_high"], hi, rel_tol=1e-9, abs_tol=1e-12)):
                    problems.append(f"CI inconsistent for {r['cluster']}/{r['variable']}")
                if not math.isclose(r["t"], r["estimate"] / r["se"], rel_tol=1e-9, abs_tol=1e-12):
                    problems.append(f"t inconsistent for {r['cluster']}/{r['variable']}")

    val = b.get("validation")
    if val and "bootstrap" in val:
        bs = val["bootstrap"]
        for e in bs["edges"]:
            if e["ci_low"] > e["ci_high"]:
                problems.append(f"bootstrap CI unordered for {e['source']}->{e['target']}")
            if bs["rule"] == "threshold-p" and e["retained"] and e["p_value"] > bs["alpha"]:
                problems.append(f"retained edge {e['source']}->{e['target']} has p > alpha")
    return problems
