"""Visual-field record files, ingestion, and a synthetic generator with ground truth.

Record files are comma-separated with a mandatory header::

    patient_id,eye,years,location_index,sensitivity_db,reliability_flag

``eye`` is ``OD`` or ``OS``; ``location_index`` follows the 54-point 24-2
numbering (row-major, 4/6/8/9/9/8/6/4 points per row). The two blind-spot
points of each eye are dropped at ingestion and the remaining 52 are
renumbered so that 1-26 form the superior and 27-52 the inferior hemifield.
A ``visit_date`` column (ISO dates) may replace ``years``.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import cholesky2, sample_gve_t
from .model import IndividualData, ModelVariant, Observation, censor

EYES = {"OD": 1, "OS": 2}
EYE_NAMES = {v: k for k, v in EYES.items()}
#: Blind-spot points of the 24-2 grid (right eye, mirrored for the left).
BLIND_SPOT = {"OD": (26, 35), "OS": (20, 29)}
N_RAW_LOCATIONS = 54
MAX_DB = 50.0

FIELDS = ["patient_id", "eye", "years", "location_index", "sensitivity_db", "reliability_flag"]


class IngestError(ValueError):
    pass


def _location_maps():
    to_model, to_raw = {}, {}
    for eye, spots in BLIND_SPOT.items():
        kept = [k for k in range(1, N_RAW_LOCATIONS + 1) if k not in spots]
        for pos, raw in enumerate(kept, start=1):
            hemi, loc = (1, pos) if pos <= 26 else (2, pos - 26)
            to_model[(eye, raw)] = (hemi, loc)
            to_raw[(eye, hemi, loc)] = raw
    return to_model, to_raw


RAW_TO_MODEL, MODEL_TO_RAW = _location_maps()


@dataclass
class VfRecord:
    patient_id: str
    eye: str
    years: float
    location_index: int
    sensitivity_db: float
    reliability_flag: int = 1


@dataclass
class VfRecordFile:
    rows: list[VfRecord] = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FIELDS)
            for r in self.rows:
                w.writerow([r.patient_id, r.eye, format(r.years, ".17g"), r.location_index,
                            format(r.sensitivity_db, ".17g"), r.reliability_flag])

    @classmethod
    def read(cls, path) -> "VfRecordFile":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise IngestError(f"{path}: empty file (header row is mandatory)") from None
            time_col = "years" if "years" in header else "visit_date" if "visit_date" in header else None
            need = [f for f in FIELDS if f != "years"]
            missing = [f for f in need if f not in header]
            if missing or time_col is None:
                raise IngestError(f"{path}: header missing columns {missing or ['years/visit_date']}")
            col = {h: j for j, h in enumerate(header)}
            dates = []
            for lineno, raw in enumerate(reader, start=2):
                if not raw or all(not c.strip() for c in raw):
                    continue
                try:
                    if len(raw) != len(header):
                        raise ValueError(f"expected {len(header)} fields, got {len(raw)}")
                    eye = raw[col["eye"]].strip().upper()
                    if eye not in EYES:
                        raise ValueError(f"eye must be OD or OS, got {eye!r}")
                    loc = int(raw[col["location_index"]])
                    if not 1 <= loc <= N_RAW_LOCATIONS:
                        raise ValueError(f"location_index out of range: {loc}")
                    sens = float(raw[col["sensitivity_db"]])
                    if not (0.0 <= sens <= MAX_DB):
                        raise ValueError(f"sensitivity out of [0, 50]: {sens}")
                    flag = int(raw[col["reliability_flag"]])
                    if flag not in (0, 1):
                        raise ValueError(f"reliability_flag must be 0 or 1, got {flag}")
                    if time_col == "years":
                        when = float(raw[col["years"]])
                        if not np.isfinite(when) or when < 0:
                            raise ValueError(f"bad years value {when}")
                    else:
                        when = dt.date.fromisoformat(raw[col["visit_date"]].strip())
                except ValueError as exc:
                    raise IngestError(f"{path}: line {lineno}: {exc}") from None
                pid = raw[col["patient_id"]].strip()
                dates.append(when)
                rows.append(VfRecord(pid, eye, 0.0, loc, sens, flag))
        if time_col == "visit_date":
            first = {}
            for r, d in zip(rows, dates):
                first[r.patient_id] = min(first.get(r.patient_id, d), d)
            for r, d in zip(rows, dates):
                r.years = (d - first[r.patient_id]).days / 365.25
        else:
            for r, d in zip(rows, dates):
                r.years = d
        return cls(rows)


def ingest(source) -> list[IndividualData]:
    """Group records into per-individual data, applying the study filters.

    ``source`` is a path or a :class:`VfRecordFile`. Unreliable rows and
    blind-spot points are dropped; years are re-based to each individual's
    first remaining visit; zero readings are flagged as censored.
    """
    records = source if isinstance(source, VfRecordFile) else VfRecordFile.read(source)
    kept = [r for r in records.rows if r.reliability_flag == 1 and r.location_index not in BLIND_SPOT[r.eye]]
    by_patient: dict[str, list[VfRecord]] = {}
    for r in kept:
        by_patient.setdefault(r.patient_id, []).append(r)
    out = []
    for pid, rows in by_patient.items():
        t0 = min(r.years for r in rows)
        times = sorted({r.years - t0 for r in rows})
        visit_of = {t: k for k, t in enumerate(times, start=1)}
        seen = set()
        obs = []
        for r in rows:
            yrs = r.years - t0
            visit = visit_of[yrs]
            hemi, loc = RAW_TO_MODEL[(r.eye, r.location_index)]
            key = (r.eye, visit, r.location_index)
            if key in seen:
                raise IngestError(f"duplicate record for patient {pid}, eye {r.eye}, visit {visit}, "
                                  f"location {r.location_index}")
            seen.add(key)
            obs.append(Observation(pid, EYES[r.eye], hemi, loc, visit, yrs,
                                   r.sensitivity_db, r.sensitivity_db == 0.0))
        obs.sort(key=lambda o: (o.visit, o.eye, o.hemifield, o.location))
        out.append(IndividualData(pid, obs))
    return out


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class TruthConfig:
    """Population-level settings of the generator."""

    model: ModelVariant = ModelVariant.MODEL3
    beta0: float = 19.89
    beta1: float = -0.31
    sigma2: float = 13.0
    beta_star0: float = 2.82
    beta_star1: float = -0.08
    sigma2_phi: float = 1.87
    cov_alpha: np.ndarray = field(default_factory=lambda: np.array([[9.0, 0.15], [0.15, 0.04]]))
    cov_gamma: np.ndarray = field(default_factory=lambda: np.array([[2.0, 0.02], [0.02, 0.01]]))
    cov_eta: np.ndarray = field(default_factory=lambda: np.array([[1.5, 0.01], [0.01, 0.01]]))
    cov_lambda: np.ndarray = field(default_factory=lambda: np.array([[6.0, 0.05], [0.05, 0.04]]))
    n_eyes: int = 2
    visit_interval: float = 0.5
    jitter: float = 1.0 / 12.0
    horizon: float = 10.5
    unreliable_fraction: float = 0.0

    def __post_init__(self):
        self.model = ModelVariant.parse(self.model)
        for name in ("cov_alpha", "cov_gamma", "cov_eta", "cov_lambda"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    @classmethod
    def preset(cls, name: str, **overrides) -> "TruthConfig":
        return cls(**{**TRUTH_PRESETS[name], **overrides})


TRUTH_PRESETS = {
    "table2": dict(model=3, beta0=19.89, beta1=-0.31, beta_star0=2.82, beta_star1=-0.08, sigma2_phi=1.87),
    "exploratory": dict(model=3, beta0=19.89, beta1=-0.31, beta_star0=2.60, beta_star1=-0.06, sigma2_phi=1.87),
    "model1": dict(model=1, beta0=20.0, beta1=-0.3, sigma2=13.0),
}


@dataclass
class GeneratorTruth:
    """Everything the generator drew, sufficient to recompute each mu and sd.

    ``latent`` holds the uncensored draws keyed like the observations; it is
    kept in memory only and is not part of the serialized record.
    """

    config: TruthConfig
    alpha: dict = field(default_factory=dict)
    gamma: dict = field(default_factory=dict)
    eta: dict = field(default_factory=dict)
    lam: dict = field(default_factory=dict)
    phi: dict = field(default_factory=dict)
    cap_events: int = 0
    latent: dict = field(default_factory=dict)

    def mu(self, ob: Observation) -> float:
        i, e, h, l, t = ob.key
        c = self.config
        a, g, et, lm = self.alpha[i], self.gamma[(i, e)], self.eta[(i, e, h)], self.lam[(i, e, h, l)]
        mu = (c.beta0 + a[0] + g[0] + et[0] + lm[0]) + (c.beta1 + a[1] + g[1] + et[1] + lm[1]) * ob.years
        if c.model.has_visit_effect:
            mu += self.phi[(i, e, t)]
        return mu

    def sd(self, mu: float) -> float:
        c = self.config
        if c.model.has_variance_link:
            return float(np.exp(c.beta_star0 + c.beta_star1 * mu))
        return float(np.sqrt(c.sigma2))

    def to_items(self) -> list[tuple[str, str]]:
        c = self.config
        f = lambda v: format(float(v), ".17g")
        items = [("model", str(int(c.model)))]
        for k in ("beta0", "beta1", "sigma2", "beta_star0", "beta_star1", "sigma2_phi", "visit_interval",
                  "jitter", "horizon", "unreliable_fraction"):
            items.append((k, f(getattr(c, k))))
        items.append(("n_eyes", str(c.n_eyes)))
        for name in ("cov_alpha", "cov_gamma", "cov_eta", "cov_lambda"):
            m = getattr(c, name)
            for a in range(2):
                for b in range(2):
                    items.append((f"{name}.{a + 1}{b + 1}", f(m[a, b])))
        items.append(("cap_events", str(self.cap_events)))
        for i, v in self.alpha.items():
            items += [(f"alpha.{i}.0", f(v[0])), (f"alpha.{i}.1", f(v[1]))]
        for (i, e), v in self.gamma.items():
            items += [(f"gamma.{i}.{e}.0", f(v[0])), (f"gamma.{i}.{e}.1", f(v[1]))]
        for (i, e, h), v in self.eta.items():
            items += [(f"eta.{i}.{e}.{h}.0", f(v[0])), (f"eta.{i}.{e}.{h}.1", f(v[1]))]
        for (i, e, h, l), v in self.lam.items():
            items += [(f"lambda.{i}.{e}.{h}.{l}.0", f(v[0])), (f"lambda.{i}.{e}.{h}.{l}.1", f(v[1]))]
        for (i, e, t), v in self.phi.items():
            items.append((f"phi.{i}.{e}.{t}", f(v)))
        return items

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for k, v in self.to_items():
                fh.write(f"{k} = {v}\n")

    @classmethod
    def read(cls, path) -> "GeneratorTruth":
        kv = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    k, v = (s.strip() for s in line.split("=", 1))
                    kv[k] = v
        cfg = dict(model=int(kv["model"]), n_eyes=int(kv["n_eyes"]))
        for k in ("beta0", "beta1", "sigma2", "beta_star0", "beta_star1", "sigma2_phi", "visit_interval",
                  "jitter", "horizon", "unreliable_fraction"):
            cfg[k] = float(kv[k])
        for name in ("cov_alpha", "cov_gamma", "cov_eta", "cov_lambda"):
            cfg[name] = np.array([[float(kv[f"{name}.{a}{b}"]) for b in (1, 2)] for a in (1, 2)])
        truth = cls(TruthConfig(**cfg), cap_events=int(kv["cap_events"]))
        pairs = {"alpha": truth.alpha, "gamma": truth.gamma, "eta": truth.eta, "lambda": truth.lam}
        for k, v in kv.items():
            parts = k.split(".")
            if parts[0] in pairs and len(parts) >= 3:
                key = tuple([parts[1]] + [int(p) for p in parts[2:-1]])
                key = key[0] if len(key) == 1 else key
                cur = list(pairs[parts[0]].get(key, (0.0, 0.0)))
                cur[int(parts[-1])] = float(v)
                pairs[parts[0]][key] = tuple(cur)
            elif parts[0] == "phi":
                truth.phi[(parts[1], int(parts[2]), int(parts[3]))] = float(v)
        return truth


def _draw_pair(cov, rng):
    z = rng.standard_normal(2)
    if not np.any(cov):
        return (0.0, 0.0)
    return tuple(map(float, cholesky2(cov) @ z))


def simulate(truth_config: TruthConfig, n_individuals: int, visits_per_eye: int, rng):
    """Generate a record file and the ground truth behind it.

    Random effects are drawn from their normal distributions, visit effects
    from t(0, sigma2_phi, 3), residuals with the variant's SD; latent values
    are capped at 50 dB (counted in ``cap_events``) and then censored at 0.
    Unreliable visual fields are flagged per (individual, eye, visit) with
    probability ``unreliable_fraction``.
    """
    if n_individuals < 1 or visits_per_eye < 1:
        raise ValueError("n_individuals and visits_per_eye must be positive")
    c = truth_config
    if c.n_eyes not in (1, 2):
        raise ValueError("n_eyes must be 1 or 2")
    width = len(str(n_individuals))
    truth = GeneratorTruth(c)
    records = VfRecordFile()
    eyes = ["OD", "OS"][: c.n_eyes]
    for n in range(n_individuals):
        pid = f"P{n + 1:0{width}d}"
        times = [0.0]
        for k in range(1, visits_per_eye):
            t = k * c.visit_interval + rng.uniform(-c.jitter, c.jitter)
            times.append(float(min(max(t, times[-1] + 1e-3), max(c.horizon, times[-1] + 1e-3))))
        truth.alpha[pid] = _draw_pair(c.cov_alpha, rng)
        for eye in eyes:
            e = EYES[eye]
            truth.gamma[(pid, e)] = _draw_pair(c.cov_gamma, rng)
            for h in (1, 2):
                truth.eta[(pid, e, h)] = _draw_pair(c.cov_eta, rng)
                for l in range(1, 27):
                    truth.lam[(pid, e, h, l)] = _draw_pair(c.cov_lambda, rng)
            for v in range(1, visits_per_eye + 1):
                if c.model.has_visit_effect and c.sigma2_phi > 0:
                    truth.phi[(pid, e, v)] = float(sample_gve_t(np.sqrt(c.sigma2_phi), rng))
                else:
                    truth.phi[(pid, e, v)] = 0.0
        for v, t in enumerate(times, start=1):
            for eye in eyes:
                e = EYES[eye]
                reliable = 0 if rng.random() < c.unreliable_fraction else 1
                for h in (1, 2):
                    for l in range(1, 27):
                        ob = Observation(pid, e, h, l, v, t, 0.0, True)
                        mu = truth.mu(ob)
                        y = mu + truth.sd(mu) * rng.standard_normal()
                        if y > MAX_DB:
                            truth.cap_events += 1
                            y = MAX_DB
                        truth.latent[ob.key] = y
                        records.rows.append(VfRecord(pid, eye, t, MODEL_TO_RAW[(eye, h, l)], censor(y), reliable))
    return records, truth
