"""Artifact pipeline: train -> hessian -> audit -> evaluate.

Layout under the output directory::

    manifest.json                 config, seeds, per-model hashes and metrics
    models/model_0003.params      parameter vector
    models/mask_0003.txt          membership mask
    hessian/model_0003.eig        eigendecomposition over the model's members
    hessian/index.json            hashes of the eigendecomposition files
    loo/target_0003.npz           leave-one-out reference losses (L-attack, LiRA-L)
    scores/<attack>/target_0003.csv   score table, plus a .json sidecar
    metrics/metrics.json, metrics/roc.csv, metrics/agreement.csv

Every text artifact carries the config hash; binary artifacts are tied to
it through the sha256 recorded in the manifest or hessian index.
"""
from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import json
from pathlib import Path

import numpy as np

from . import attacks as A
from . import evaluate as E
from . import model as M
from .config import ExperimentConfig, model_seed
from .data import MembershipMask, bernoulli_split
from .errors import FormatError, IhaError, InsufficientReferences, MissingArtifact
from .fsutil import atomic_write_bytes, atomic_write_text, sha256_file
from .linalg import EigenDecomposition, sym_eigendecompose
from .training import final_metrics, train

MANIFEST = "manifest.json"
SCORE_HEADER = ["record_index", "attack", "score", "is_member"]
THRESHOLD_RULE = "member iff score > threshold"


def _json_dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


class Layout:
    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def manifest(self) -> Path:
        return self.root / MANIFEST

    def params(self, k: int) -> Path:
        return self.root / "models" / f"model_{k:04d}.params"

    def mask(self, k: int) -> Path:
        return self.root / "models" / f"mask_{k:04d}.txt"

    def eig(self, k: int) -> Path:
        return self.root / "hessian" / f"model_{k:04d}.eig"

    @property
    def eig_index(self) -> Path:
        return self.root / "hessian" / "index.json"

    def loo(self, k: int) -> Path:
        return self.root / "loo" / f"target_{k:04d}.npz"

    def scores(self, attack_id: str, k: int) -> Path:
        return self.root / "scores" / attack_id / f"target_{k:04d}.csv"

    def sidecar(self, attack_id: str, k: int) -> Path:
        return self.scores(attack_id, k).with_suffix(".json")

    @property
    def metrics_dir(self) -> Path:
        return self.root / "metrics"


def _pool_map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with cf.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# train


def _read_manifest(layout: Layout) -> dict | None:
    if not layout.manifest.exists():
        return None
    try:
        return json.loads(layout.manifest.read_text())
    except json.JSONDecodeError:
        return None


def _entry_intact(layout: Layout, entry: dict, spec: M.ModelSpec) -> bool:
    k = entry["index"]
    p, m = layout.params(k), layout.mask(k)
    if not (p.exists() and m.exists()):
        return False
    if sha256_file(p) != entry["param_sha256"] or sha256_file(m) != entry["mask_sha256"]:
        return False
    try:
        M.load_parameters(p, spec)
        MembershipMask.load(m)
    except IhaError:
        return False
    return True


def cmd_train(cfg: ExperimentConfig) -> dict:
    """Train every model of the game. Intact models from an identical config are kept."""
    layout = Layout(cfg.output_dir)
    ds, spec = cfg.dataset, cfg.model_spec
    old = _read_manifest(layout)
    kept = {}
    if old is not None and old.get("config_hash") == cfg.hash:
        for entry in old.get("models", []):
            if entry["index"] < cfg.num_models and _entry_intact(layout, entry, spec):
                kept[entry["index"]] = entry

    def one(k: int) -> dict:
        mask = bernoulli_split(len(ds), cfg.gamma, cfg.mask_seed(k))
        sgd = cfg.sgd(k)
        w = train(spec, ds, mask, sgd)
        M.save_parameters(layout.params(k), spec, w)
        mask.save(layout.mask(k))
        return {
            "index": k,
            "sgd_seed": sgd.seed,
            "mask_seed": mask.seed,
            "members": int(mask.bits.sum()),
            "param_file": layout.params(k).relative_to(layout.root).as_posix(),
            "mask_file": layout.mask(k).relative_to(layout.root).as_posix(),
            "param_sha256": sha256_file(layout.params(k)),
            "mask_sha256": sha256_file(layout.mask(k)),
            "metrics": final_metrics(spec, w, ds, mask),
        }

    todo = [k for k in range(cfg.num_models) if k not in kept]
    for entry in _pool_map(one, todo, cfg.threads):
        kept[entry["index"]] = entry
    manifest = {
        "format": "ihaudit-manifest",
        "config_version": cfg.raw["version"],
        "config_hash": cfg.hash,
        "config": {k: v for k, v in cfg.raw.items() if k not in ("output_dir", "threads")},
        "dataset": {"name": ds.name, "records": len(ds), "features": ds.feature_dim, "classes": ds.num_classes},
        "model_spec": spec.to_dict(),
        "models": [kept[k] for k in sorted(kept)],
    }
    text = _json_dump(manifest)
    if not (layout.manifest.exists() and layout.manifest.read_text() == text):
        atomic_write_text(layout.manifest, text)
    manifest["retrained"] = todo
    return manifest


def load_manifest(cfg: ExperimentConfig) -> dict:
    layout = Layout(cfg.output_dir)
    if not layout.manifest.exists():
        raise MissingArtifact(layout.manifest)
    man = json.loads(layout.manifest.read_text())
    if man.get("config_hash") != cfg.hash:
        raise FormatError(f"{layout.manifest} was written for a different config; rerun train")
    return man


def load_model(cfg: ExperimentConfig, k: int, manifest: dict | None = None) -> tuple[np.ndarray, MembershipMask]:
    layout = Layout(cfg.output_dir)
    man = manifest or load_manifest(cfg)
    entries = {e["index"]: e for e in man["models"]}
    p, m = layout.params(k), layout.mask(k)
    for path in (p, m):
        if not path.exists():
            raise MissingArtifact(path)
    if k not in entries:
        raise MissingArtifact(p)
    if sha256_file(p) != entries[k]["param_sha256"]:
        raise FormatError(f"{p}: contents do not match the manifest hash")
    return M.load_parameters(p, cfg.model_spec), MembershipMask.load(m)


# --------------------------------------------------------------------------
# hessian


def _read_eig_index(layout: Layout, cfg: ExperimentConfig) -> dict:
    if layout.eig_index.exists():
        idx = json.loads(layout.eig_index.read_text())
        if idx.get("config_hash") == cfg.hash:
            return idx
    return {"config_hash": cfg.hash, "models": {}}


def cmd_hessian(cfg: ExperimentConfig, targets=None) -> dict:
    """Eigendecompose each target's Hessian over its members and persist it."""
    layout = Layout(cfg.output_dir)
    man = load_manifest(cfg)
    targets = cfg.targets if targets is None else list(targets)
    index = _read_eig_index(layout, cfg)
    ds, spec = cfg.dataset, cfg.model_spec
    param_sha = {e["index"]: e["param_sha256"] for e in man["models"]}

    def fresh(k):
        e = index["models"].get(str(k))
        p = layout.eig(k)
        return e is not None and p.exists() and e["param_sha256"] == param_sha.get(k) and sha256_file(p) == e["sha256"]

    def one(k):
        w, mask = load_model(cfg, k, man)
        members = mask.members
        H = M.exact_hessian(spec, w, (ds.X[members], ds.y[members]))
        decomp = sym_eigendecompose(H)
        decomp.save(layout.eig(k))
        return k, {
            "param_sha256": param_sha[k],
            "sha256": sha256_file(layout.eig(k)),
            "min_eigenvalue": float(decomp.eigenvalues[-1]),
            "max_eigenvalue": float(decomp.eigenvalues[0]),
        }

    todo = [k for k in targets if not fresh(k)]
    for k, e in _pool_map(one, todo, cfg.threads):
        index["models"][str(k)] = e
    text = _json_dump(index)
    if not (layout.eig_index.exists() and layout.eig_index.read_text() == text):
        atomic_write_text(layout.eig_index, text)
    return index


def load_hessian(cfg: ExperimentConfig, k: int) -> EigenDecomposition | None:
    """The persisted eigendecomposition for model ``k``, or None when absent or stale."""
    layout = Layout(cfg.output_dir)
    p = layout.eig(k)
    if not p.exists() or not layout.eig_index.exists():
        return None
    index = json.loads(layout.eig_index.read_text())
    e = index.get("models", {}).get(str(k))
    if index.get("config_hash") != cfg.hash or e is None or sha256_file(p) != e["sha256"]:
        return None
    return EigenDecomposition.load(p)


# --------------------------------------------------------------------------
# audit


def candidates(cfg: ExperimentConfig, mask: MembershipMask, k: int) -> np.ndarray:
    """All members of model ``k`` plus an equally large seeded sample of non-members."""
    members, others = mask.members, mask.non_members
    rng = np.random.default_rng(model_seed(cfg.seed, k, "nonmember"))
    picked = rng.choice(others, size=min(members.size, others.size), replace=False)
    return np.sort(np.concatenate([members, picked]))


def _limit(idx: np.ndarray, bits: np.ndarray, limit, seed: int) -> np.ndarray:
    """Balanced seeded subsample of at most ``limit`` candidates."""
    if limit is None or idx.size <= limit:
        return idx
    rng = np.random.default_rng(seed)
    mem, non = idx[bits[idx]], idx[~bits[idx]]
    half = limit // 2
    take_m = min(mem.size, half)
    take_n = min(non.size, limit - take_m)
    return np.sort(np.concatenate([rng.choice(mem, take_m, replace=False), rng.choice(non, take_n, replace=False)]))


def _target_context(cfg, spec, w, mask, attack, k):
    ds = cfg.dataset
    mode = A.EXACT_HESSIAN if attack.settings.get("hessian") == "exact" else A.HVP_ONLY
    if mode == A.EXACT_HESSIAN:
        decomp = load_hessian(cfg, k)
        if decomp is not None:
            ctx = A.prepare_target_context(spec, w, ds, mask, A.HVP_ONLY)
            ctx.hessian = decomp
            return ctx, "persisted"
    return A.prepare_target_context(spec, w, ds, mask, mode), "computed" if mode == A.EXACT_HESSIAN else "cg"


def _loo_losses(cfg, spec, mask, k, idx, count):
    """Leave-one-out reference losses for records ``idx``, cached per target."""
    layout = Layout(cfg.output_dir)
    path = layout.loo(k)
    cache = {}
    if path.exists():
        with np.load(path) as z:
            if str(z["config_hash"]) == cfg.hash and z["losses"].shape[1] == count:
                cache = {int(r): row for r, row in zip(z["record_index"], z["losses"])}
    missing = [int(r) for r in idx if int(r) not in cache]
    ds = cfg.dataset
    sgd = cfg.sgd(k)
    seed = model_seed(cfg.seed, k, "loo")

    def one(r):
        return r, A.loo_reference_losses(spec, ds, mask.bits, r, sgd, count, seed)

    for r, losses in _pool_map(one, missing, cfg.threads):
        cache[r] = losses
    if missing:
        keys = np.array(sorted(cache), dtype=np.int64)
        buf = io.BytesIO()
        np.savez(buf, config_hash=np.array(cfg.hash), record_index=keys, losses=np.stack([cache[r] for r in keys]))
        atomic_write_bytes(path, buf.getvalue())
    return np.stack([cache[int(r)] for r in idx])


def _scores_csv(attack_id, idx, scores, is_member, config_hash) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SCORE_HEADER)
    for r, s, m in zip(idx, scores, is_member):
        wr.writerow([int(r), attack_id, repr(float(s)), int(bool(m))])
    return buf.getvalue()


def score_target(cfg: ExperimentConfig, attack_id: str, k: int, manifest=None) -> tuple[E.ScoreTable, dict]:
    """Score model ``k``'s candidate records with one configured attack."""
    attack = cfg.attack(attack_id)
    man = manifest or load_manifest(cfg)
    spec, ds = cfg.model_spec, cfg.dataset
    w, mask = load_model(cfg, k, man)
    idx = candidates(cfg, mask, k)
    X, y = ds.X, ds.y
    info: dict = {}
    name = attack.name

    if name in ("lattack", "lira_l"):
        idx = _limit(idx, mask.bits, attack.settings.get("max_records"), model_seed(cfg.seed, k, "nonmember"))
    is_member = mask.bits[idx]

    if name == "loss":
        scores = A.loss_attack(spec, w, X[idx], y[idx])
    elif name == "sif":
        ctx, src = _target_context(cfg, spec, w, mask, attack, k)
        scores = A.sif_scores(ctx, X[idx], y[idx], attack.conditioning())
        info["hessian"] = src
    elif name == "iha":
        ctx, src = _target_context(cfg, spec, w, mask, attack, k)
        s = attack.settings
        icfg = A.IhaConfig.from_sgd(
            cfg.sgd(k),
            n=ctx.n,
            gamma=cfg.gamma,
            terms=s["terms"],
            conditioning=attack.conditioning(),
            l0_fraction=float(s["l0_fraction"]),
            output_mode=s["output_mode"],
            l0_seed=model_seed(cfg.seed, k, "l0"),
        )
        scores = A.iha_scores(ctx, icfg, X[idx], y[idx], is_member, idx)
        info["hessian"] = src
        info["iha_config"] = icfg.to_dict()
        info["stationary_loss_estimate"] = ctx.train_loss
        if icfg.l0_fraction < 1.0:
            info["l0_fraction"] = icfg.l0_fraction
            info["l0_subset_seeds"] = {str(int(r)): [icfg.l0_seed, int(r)] for r in idx}
    elif name == "lira":
        stat = attack.settings["statistic"]
        target_stats = A.lira_statistic(spec, w, X[idx], y[idx], stat)
        ref_stats, ref_in = [], []
        for j in range(cfg.num_models):
            if j == k:
                continue
            wj, mj = load_model(cfg, j, man)
            ref_stats.append(A.lira_statistic(spec, wj, X[idx], y[idx], stat))
            ref_in.append(mj.bits[idx])
        if not ref_stats:
            raise InsufficientReferences("LiRA needs at least one other model in the game")
        scores = A.lira_scores(target_stats, np.array(ref_stats), np.array(ref_in), attack.settings["mode"], idx)
        info["reference_models"] = len(ref_stats)
        info["statistic_orientation"] = "lower means member-like"
    elif name in ("lattack", "lira_l"):
        count = int(attack.settings["references"])
        refs = _loo_losses(cfg, spec, mask, k, idx, count)
        target_losses = M.per_example_losses(spec, w, X[idx], y[idx])
        fn = A.l_attack_score if name == "lattack" else A.lira_l_score
        scores = np.array([fn(t, r) for t, r in zip(target_losses, refs)])
        info["references_per_record"] = count
    else:
        raise FormatError(f"unknown attack {name!r}")

    table = E.ScoreTable(idx, np.asarray(scores, dtype=np.float64), is_member, attack_id, str(k))
    sidecar = {
        "config_hash": cfg.hash,
        "attack": attack.to_dict(),
        "target_model": k,
        "param_sha256": next(e["param_sha256"] for e in man["models"] if e["index"] == k),
        "records": int(idx.size),
        "members": int(is_member.sum()),
        "non_members": int((~is_member).sum()),
        "score_orientation": "higher means member",
        **info,
    }
    if "conditioning" in attack.settings:
        sidecar["conditioning"] = attack.conditioning().to_dict()
    return table, sidecar


def cmd_audit(cfg: ExperimentConfig, attack_id: str, target: int, manifest=None) -> Path:
    layout = Layout(cfg.output_dir)
    table, sidecar = score_target(cfg, attack_id, target, manifest)
    path = layout.scores(attack_id, target)
    atomic_write_text(path, _scores_csv(attack_id, table.record_index, table.score, table.is_member, cfg.hash))
    atomic_write_text(layout.sidecar(attack_id, target), _json_dump(sidecar))
    return path


def read_score_table(path) -> tuple[E.ScoreTable, str]:
    """Parse a score CSV; returns the table and the config hash it carries."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# config_hash="):
        raise FormatError(f"{path}: missing config hash line")
    config_hash = lines[0].split("=", 1)[1].strip()
    rows = list(csv.reader(lines[1:]))
    if not rows or rows[0] != SCORE_HEADER:
        raise FormatError(f"{path}: header must be {','.join(SCORE_HEADER)}")
    body = rows[1:]
    if not body:
        raise FormatError(f"{path}: no score rows")
    attacks = {r[1] for r in body if len(r) == 4}
    if any(len(r) != 4 for r in body) or len(attacks) != 1:
        raise FormatError(f"{path}: rows must have 4 fields and a single attack id")
    try:
        idx = [int(r[0]) for r in body]
        score = [float(r[2]) for r in body]
        mem = [int(r[3]) for r in body]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if set(mem) - {0, 1}:
        raise FormatError(f"{path}: is_member must be 0 or 1")
    tail = path.stem.rsplit("_", 1)[-1]
    target = str(int(tail)) if tail.isdigit() else tail
    return E.ScoreTable(idx, score, np.array(mem, dtype=bool), attacks.pop(), target), config_hash


# --------------------------------------------------------------------------
# evaluate


def _fmt(x: float) -> str:
    return repr(float(x))


def cmd_evaluate(cfg: ExperimentConfig | None, paths=None, out_dir=None) -> dict:
    """Metrics JSON, ROC CSV and agreement CSV from score tables.

    With no explicit ``paths`` every table under ``scores/`` is used.
    """
    if paths is None:
        if cfg is None:
            raise FormatError("evaluate needs score tables or a config")
        paths = sorted(Layout(cfg.output_dir).root.joinpath("scores").glob("*/target_*.csv"))
    paths = [Path(p) for p in paths]
    if not paths:
        raise MissingArtifact(Layout(cfg.output_dir).root / "scores" if cfg else "scores")
    loaded = [read_score_table(p) for p in paths]
    hashes = {h for _, h in loaded}
    if len(hashes) != 1 or (cfg is not None and hashes != {cfg.hash}):
        raise FormatError(f"score tables carry mismatched config hashes: {sorted(hashes)}")
    config_hash = hashes.pop()
    tables = [t for t, _ in loaded]
    fprs = cfg.fprs if cfg is not None else E.DEFAULT_FPRS
    q_agree = cfg.agreement_fpr if cfg is not None else 0.05
    out_dir = Path(out_dir) if out_dir is not None else Layout(cfg.output_dir).metrics_dir

    summary = E.aggregate(tables, fprs)
    per_model: dict = {}
    roc = io.StringIO()
    roc.write(f"# config_hash={config_hash}\n")
    wr = csv.writer(roc, lineterminator="\n")
    wr.writerow(["attack", "target_model", "fpr", "tpr"])
    for t in sorted(tables, key=lambda t: (t.attack_id, t.target_model_id)):
        per_model.setdefault(t.attack_id, {})[t.target_model_id] = E.summarize(t, fprs)
        curve = E.roc_curve(t)
        for f, p in zip(curve.fpr, curve.tpr):
            wr.writerow([t.attack_id, t.target_model_id, _fmt(f), _fmt(p)])
    for attack_id, entry in summary.items():
        entry["per_model"] = per_model[attack_id]
        if attack_id.startswith("iha") and cfg is not None:
            try:
                entry["terms"] = cfg.attack(attack_id).settings.get("terms")
            except FormatError:
                pass

    names, agree, realized, agree_targets, excluded = _agreement(tables, q_agree)
    metrics = {
        "config_hash": config_hash,
        "threshold_rule": THRESHOLD_RULE,
        "tie_rule": "ties between a member and a non-member count one half",
        "tpr_at_fpr_rule": "largest achievable fpr not above the nominal value",
        "fprs": list(fprs),
        "attacks": summary,
        "agreement": {
            "nominal_fpr": q_agree,
            "realized_fpr": realized,
            "target_models": agree_targets,
            "excluded_attacks": excluded,
            "upper_triangle": "agreement on members",
            "lower_triangle": "agreement on non-members",
        },
    }
    agree_csv = io.StringIO()
    agree_csv.write(f"# config_hash={config_hash}\n")
    wa = csv.writer(agree_csv, lineterminator="\n")
    wa.writerow([""] + names)
    for name, row in zip(names, agree):
        wa.writerow([name] + [_fmt(v) for v in row])

    atomic_write_text(out_dir / "metrics.json", _json_dump(metrics))
    atomic_write_text(out_dir / "roc.csv", roc.getvalue())
    atomic_write_text(out_dir / "agreement.csv", agree_csv.getvalue())
    return metrics


def _agreement(tables, q):
    """Agreement matrix averaged over target models.

    Per target, the record set shared by most attacks is the reference;
    attacks that score a different set on any target are left out.
    """
    by_target: dict = {}
    for t in tables:
        by_target.setdefault(t.target_model_id, {})[t.attack_id] = t
    attacks = sorted({t.attack_id for t in tables})
    included = set(attacks)
    for group in by_target.values():
        keys = [g.record_index.tobytes() for g in group.values()]
        common = max(set(keys), key=keys.count)
        included &= {a for a, key in zip(group, keys) if key == common}
    included = sorted(included)
    excluded = [a for a in attacks if a not in included]
    targets = sorted(by_target)
    if not included:
        return [E.GT], np.eye(1), {}, targets, excluded
    mats, realized = [], {a: [] for a in included}
    for target in targets:
        group = by_target[target]
        labels = group[included[0]].is_member
        preds = {}
        for a in included:
            p, fpr = E.threshold_predictions(group[a].score, labels, q)
            preds[a] = p
            realized[a].append(fpr)
        names, mat = E.agreement_matrix(preds, labels)
        mats.append(mat)
    return names, np.mean(mats, axis=0), {a: float(np.mean(v)) for a, v in realized.items()}, targets, excluded


# --------------------------------------------------------------------------
# run-all


def run_all(cfg: ExperimentConfig) -> dict:
    man = cmd_train(cfg)
    if any(a.needs_exact_hessian for a in cfg.attacks):
        cmd_hessian(cfg)
    man = load_manifest(cfg)
    jobs = [(a.id, k) for a in cfg.attacks for k in cfg.targets]
    _pool_map(lambda job: cmd_audit(cfg, job[0], job[1], man), jobs, cfg.threads)
    return cmd_evaluate(cfg)
