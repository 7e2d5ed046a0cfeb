"""Benchmark driver: episode suites, metrics, ablation variants and reports."""

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

from .agent import LEVELS, EpisodeConfig, run_episode
from .llm import LLMClient
from .oracle import expert_length
from .sim.scene import TASK_TYPES, SceneProfile, make_episode

log = logging.getLogger(__name__)

SUITE_VERSION = 1
EXIT_OK = 0
EXIT_EMPTY = 3

VARIANTS = {
    "full": (),
    "w/o high": ("high",),
    "w/o mid": ("mid",),
    "w/o low": ("low",),
    "all-off": ("high", "mid", "low"),
}


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeMetrics:
    success: bool
    gc_fraction: float
    path_len: int
    expert_len: int
    plw_sr: float
    plw_gc: float

    def __post_init__(self):
        if not 0.0 <= self.gc_fraction <= 1.0:
            raise ValueError("gc_fraction must lie in [0, 1]")


def path_weight(expert_len, path_len):
    """L* / max(L*, L^); 1 when the agent is at least as short as the expert."""
    denom = max(expert_len, path_len)
    return expert_len / denom if denom > 0 else 1.0


def metrics_from(success, gc_fraction, path_len, expert_len):
    p = path_weight(expert_len, path_len)
    return EpisodeMetrics(bool(success), float(gc_fraction), int(path_len), int(expert_len),
                          float(success) * p, float(gc_fraction) * p)


def compute_metrics(record, task, expert_len):
    """Metrics of a finished episode record (ground-truth goal ledger from its end event)."""
    end = record.summary
    if end is None:
        raise ValueError(f"record {record.episode_id} has no end event")
    per = end["goal_conditions"]
    gc = sum(per) / len(per) if per else 0.0
    return metrics_from(end["success"], gc, end["path_len"], expert_len)


# ----------------------------------------------------------------------
# suites
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: str
    seed: int
    task_type: str
    stratum: str = "mixed"
    profile: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)  # extra make_episode keywords

    def build(self):
        return make_episode(self.seed, SceneProfile.from_dict(self.profile), self.task_type,
                            **self.options)


@dataclass
class SuiteSpec:
    episodes: list
    variants: list = field(default_factory=lambda: list(VARIANTS))

    def to_dict(self):
        return {"schema_version": SUITE_VERSION, "variants": list(self.variants),
                "episodes": [asdict(e) for e in self.episodes]}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version", SUITE_VERSION) != SUITE_VERSION:
            raise ValueError("unsupported suite schema")
        unknown = [v for v in d.get("variants", VARIANTS) if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}")
        return cls([EpisodeSpec(**e) for e in d.get("episodes", [])],
                   list(d.get("variants", VARIANTS)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_suite(n=200, seed=0, variants=None):
    """Half occlusion-heavy, half mixed; task types cycle within each stratum.

    Occlusion-heavy episodes hide every small object and keep the destination
    outside the target's hosts. Mixed episodes use the default occlusion rate
    and name the destination by a synonym every third episode.
    """
    eps = []
    heavy = n // 2
    for i in range(n):
        tt = TASK_TYPES[(i if i < heavy else i - heavy) % len(TASK_TYPES)]
        s = seed * 100003 + i
        if i < heavy:
            eps.append(EpisodeSpec(f"ep{i:04d}", s, tt, "occlusion",
                                   {"occlusion_rate": 1.0},
                                   {"target_hidden": True, "destination_not_host": True}))
        else:
            named = (i - heavy) % 3 == 0
            eps.append(EpisodeSpec(f"ep{i:04d}", s, tt, "mixed", {"occlusion_rate": 0.5},
                                   {"receptacle_alias": named}))
    return SuiteSpec(eps, list(variants or VARIANTS))


def variant_config(base, name):
    cfg = base
    for level in VARIANTS[name]:
        cfg = replace(cfg, **{LEVELS[level]: False})
    return cfg


# ----------------------------------------------------------------------
# running
# ----------------------------------------------------------------------

ROW_FIELDS = ("variant", "episode_id", "stratum", "task_type", "success", "gc_fraction",
              "path_len", "expert_len", "plw_sr", "plw_gc", "termination", "audits_fired",
              "corrections_applied", "record_sha256")


def _expert(spec):
    scene, task = spec.build()
    return spec.episode_id, expert_length(scene, task)


def _episode(job):
    spec, variant, cfg, corrector, L = job
    scene, task = spec.build()
    cfg = replace(cfg, seed=cfg.seed + spec.seed)
    client = None
    if "llm" in (cfg.auditor_backend, cfg.host_backend):
        client = LLMClient.from_env()  # None keeps the rule backends
    rec = run_episode(scene, task, cfg, episode_id=spec.episode_id, corrector=corrector,
                      llm_client=client)
    return variant, spec.episode_id, rec, compute_metrics(rec, task, L)


def _pmap(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


@dataclass
class BenchmarkResult:
    rows: list  # dicts with ROW_FIELDS, sorted by (variant order, episode id)
    variants: list
    records: dict = field(default_factory=dict)  # (variant, episode id) -> EpisodeRecord

    @property
    def exit_code(self):
        return EXIT_OK if self.rows else EXIT_EMPTY

    def aggregate(self, variant, key=None, value=None):
        rows = [r for r in self.rows if r["variant"] == variant
                and (key is None or r[key] == value)]
        return aggregate(rows)

    def task_types(self):
        return [t for t in TASK_TYPES if any(r["task_type"] == t for r in self.rows)]

    def strata(self):
        return sorted({r["stratum"] for r in self.rows})


def aggregate(rows):
    """Percent means of SR, GC and their path-weighted forms."""
    n = len(rows)
    if not n:
        return {"n": 0, "sr": 0.0, "gc": 0.0, "plw_sr": 0.0, "plw_gc": 0.0}

    def mean(k):
        return 100.0 * sum(float(r[k]) for r in rows) / n

    return {"n": n, "sr": mean("success"), "gc": mean("gc_fraction"),
            "plw_sr": mean("plw_sr"), "plw_gc": mean("plw_gc")}


def run_benchmark(suite, config=None, workers=1, corrector=None, expert_cache=None,
                  keep_records=False):
    """Run every variant of ``suite`` on every episode.

    ``expert_cache`` maps episode id to L* and is filled in place, so a second
    call (or the ablation command) does not recompute the oracle.
    """
    base = config or EpisodeConfig()
    cache = expert_cache if expert_cache is not None else {}
    todo = [e for e in suite.episodes if e.episode_id not in cache]
    for eid, L in _pmap(_expert, todo, workers):
        cache[eid] = L
    jobs = [(e, v, variant_config(base, v), corrector, cache[e.episode_id])
            for v in suite.variants for e in suite.episodes]
    by_id = {e.episode_id: e for e in suite.episodes}
    rows, records = [], {}
    for variant, eid, rec, m in _pmap(_episode, jobs, workers):
        spec = by_id[eid]
        end = rec.summary
        rows.append({
            "variant": variant, "episode_id": eid, "stratum": spec.stratum,
            "task_type": spec.task_type, "success": int(m.success),
            "gc_fraction": round(m.gc_fraction, 6), "path_len": m.path_len,
            "expert_len": m.expert_len, "plw_sr": round(m.plw_sr, 6),
            "plw_gc": round(m.plw_gc, 6), "termination": end["termination"],
            "audits_fired": end["audits_fired"],
            "corrections_applied": end["corrections_applied"], "record_sha256": rec.digest(),
        })
        if keep_records:
            records[(variant, eid)] = rec
    order = {v: i for i, v in enumerate(suite.variants)}
    rows.sort(key=lambda r: (order[r["variant"]], r["episode_id"]))
    return BenchmarkResult(rows, list(suite.variants), records)


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------

def _cell(a, x, plw):
    return f"{a[x]:5.1f} ({a[plw]:5.1f})"


def format_table(result):
    """Text table with columns ``GC(PLWGC)`` and ``SR(PLWSR)`` per variant,
    followed by the per-task-type and per-stratum breakdowns."""
    out = [f"{'variant':<10} {'n':>4}  {'GC(PLWGC)':>13}  {'SR(PLWSR)':>13}"]
    for v in result.variants:
        a = result.aggregate(v)
        out.append(f"{v:<10} {a['n']:>4}  {_cell(a, 'gc', 'plw_gc'):>13}  {_cell(a, 'sr', 'plw_sr'):>13}")
    for key, values in (("task_type", result.task_types()), ("stratum", result.strata())):
        if not values:
            continue
        out.append("")
        out.append(f"SR by {key.replace('_', ' ')}")
        out.append(f"{'':<20}" + "".join(f"{v:>10}" for v in result.variants))
        for val in values:
            cells = "".join(f"{result.aggregate(v, key, val)['sr']:>10.1f}" for v in result.variants)
            out.append(f"{val:<20}{cells}")
    return "\n".join(out) + "\n"


def summary_rows(result):
    rows = []
    for v in result.variants:
        rows.append({"variant": v, "group": "all", **result.aggregate(v)})
        for t in result.task_types():
            rows.append({"variant": v, "group": t, **result.aggregate(v, "task_type", t)})
        for s in result.strata():
            rows.append({"variant": v, "group": f"stratum:{s}", **result.aggregate(v, "stratum", s)})
    return rows


def _csv(rows, fields):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.4f}" if isinstance(r[k], float) else r[k]) for k in fields})
    return buf.getvalue()


def episodes_csv(result):
    return _csv(result.rows, ROW_FIELDS)


def logs_digest(result):
    """Hash over every trajectory log, in row order."""
    h = hashlib.sha256()
    for r in result.rows:
        h.update(f"{r['variant']}|{r['episode_id']}|{r['record_sha256']}\n".encode())
    return h.hexdigest()


def _slug(variant):
    return variant.replace("/", "").replace(" ", "_")


def write_outputs(result, out_dir):
    """summary.txt, summary.csv, episodes.csv and logs/<variant>/<episode>.jsonl."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(format_table(result))
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write(_csv(summary_rows(result), ("variant", "group", "n", "sr", "gc", "plw_sr", "plw_gc")))
    with open(os.path.join(out_dir, "episodes.csv"), "w") as fh:
        fh.write(episodes_csv(result))
    for (variant, eid), rec in result.records.items():
        d = os.path.join(out_dir, "logs", _slug(variant))
        os.makedirs(d, exist_ok=True)
        rec.write(os.path.join(d, f"{eid}.jsonl"))
