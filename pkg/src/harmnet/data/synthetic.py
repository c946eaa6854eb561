"""Seeded generator of incident-like narratives with controllable class skew.

A report is a shuffled run of category context sentences and class-neutral
distractor sentences. One severity-specific outcome sentence and ``r`` copies
of every ``fixed`` sentence are each inserted at a random slot, with ``r``
drawn per report from ``fixed_repeats``. ``displace`` maps a severity code to
the index of a fixed template that loses one copy in reports of that code, so
an outcome can stand in for a fixed sentence of the same shape. With
probability ``lead_rate`` the outcome opens the report instead, as a narrative
that states the incident first would. Templates are plain strings with three
kinds of holes:

``{slot}``
    one random entry of ``lexicon[slot]`` (entries may span several words)
``{gap:a-b}``
    between ``a`` and ``b`` random tokens from ``lexicon["filler"]``
``{category}``
    the report's safety category, lowercased

``noise_rate`` inserts a random ``noise_vocab`` token after each token with
that probability.
"""

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError
from .labels import HARM_CODES, SEVERITY_CODES
from .reports import Report

_HOLE = re.compile(r"\{([a-z_]+)(?::(\d+)-(\d+))?\}")


@dataclass
class GeneratorSpec:
    priors: Dict[str, float]
    templates: Dict[str, List[str]]
    lexicon: Dict[str, List[str]]
    categories: Dict[str, Tuple[float, float]]  # name -> (frequency weight, harm ratio)
    context: Dict[str, List[str]]
    distractors: List[str] = field(default_factory=list)
    distractor_rate: float = 0.5
    fixed: List[str] = field(default_factory=list)
    fixed_repeats: Tuple[int, int] = (1, 1)
    displace: Dict[str, int] = field(default_factory=dict)
    lead_rate: float = 0.0
    sentences: Tuple[int, int] = (3, 8)
    noise_rate: float = 0.0
    noise_vocab: List[str] = field(default_factory=list)
    max_tokens: Optional[int] = None

    def validate(self):
        unknown = set(self.priors) - set(SEVERITY_CODES)
        if unknown:
            raise ConfigError(f"priors name unknown severity codes {sorted(unknown)}")
        total = sum(self.priors.values())
        if abs(total - 1.0) > 1e-9 or min(self.priors.values()) < 0:
            raise ConfigError(f"class priors must be non-negative and sum to 1, got {total}")
        for code, p in self.priors.items():
            if p > 0 and not self.templates.get(code):
                raise ConfigError(f"empty template bank for severity {code}")
        if not self.categories:
            raise ConfigError("at least one category is required")
        for cat in self.categories:
            if not self.context.get(cat):
                raise ConfigError(f"empty context bank for category {cat!r}")
        if not 0.0 <= self.lead_rate <= 1.0:
            raise ConfigError(f"lead_rate must lie in [0, 1], got {self.lead_rate}")
        if self.noise_rate > 0 and not self.noise_vocab:
            raise ConfigError("noise_rate > 0 needs a noise vocabulary")
        lo, hi = self.sentences
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad sentence-count range {self.sentences}")
        lo, hi = self.fixed_repeats
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad fixed-repeat range {self.fixed_repeats}")
        for code, idx in self.displace.items():
            if not 0 <= idx < len(self.fixed):
                raise ConfigError(f"displace[{code}] = {idx} names no fixed template")
            if lo < 1:
                raise ConfigError("displace needs at least one fixed copy per report")


def _fill(template: str, rng, lexicon, category) -> List[str]:
    out = []
    pos = 0
    for m in _HOLE.finditer(template):
        out.extend(template[pos:m.start()].split())
        name, lo, hi = m.group(1), m.group(2), m.group(3)
        if name == "category":
            out.extend(category.lower().split())
        elif name == "gap":
            if lo is None or int(lo) > int(hi):
                raise ConfigError(f"gap hole needs a range like {{gap:0-3}} in {template!r}")
            k = int(rng.integers(int(lo), int(hi) + 1))
            words = lexicon["filler"]
            out.extend(words[int(i)] for i in rng.integers(0, len(words), size=k))
        else:
            if name not in lexicon:
                raise ConfigError(f"template hole {{{name}}} has no lexicon entry")
            words = lexicon[name]
            out.extend(words[int(rng.integers(0, len(words)))].split())
        pos = m.end()
    out.extend(template[pos:].split())
    return out


def _category_tables(spec: GeneratorSpec):
    names = list(spec.categories)
    w = np.array([spec.categories[c][0] for c in names], float)
    r = np.array([spec.categories[c][1] for c in names], float)
    harm = w * r
    noharm = w * (1.0 - r)
    if harm.sum() <= 0:
        harm = w.copy()
    if noharm.sum() <= 0:
        noharm = w.copy()
    return names, harm / harm.sum(), noharm / noharm.sum()


def gen_synthetic(spec: GeneratorSpec, count: int, seed: int) -> List[Report]:
    """Sample ``count`` labeled reports; deterministic under ``seed``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    codes = [c for c in SEVERITY_CODES if spec.priors.get(c, 0.0) > 0]
    probs = np.array([spec.priors[c] for c in codes])
    probs = probs / probs.sum()
    cat_names, p_harm, p_noharm = _category_tables(spec)
    lo, hi = spec.sentences
    reports = []
    for _ in range(count):
        code = codes[int(rng.choice(len(codes), p=probs))]
        is_harm = code in HARM_CODES
        category = cat_names[int(rng.choice(len(cat_names), p=p_harm if is_harm else p_noharm))]
        n_sent = int(rng.integers(lo, hi + 1))
        bank = spec.context[category]
        sentences = []
        for _ in range(n_sent):
            if spec.distractors and rng.random() < spec.distractor_rate:
                tpl = spec.distractors[int(rng.integers(0, len(spec.distractors)))]
            else:
                tpl = bank[int(rng.integers(0, len(bank)))]
            sentences.append(_fill(tpl, rng, spec.lexicon, category))
        tpls = spec.templates[code]
        outcome = _fill(tpls[int(rng.integers(0, len(tpls)))], rng, spec.lexicon, category)
        reps = int(rng.integers(spec.fixed_repeats[0], spec.fixed_repeats[1] + 1))
        for j, tpl in enumerate(spec.fixed):
            for _ in range(reps - (spec.displace.get(code) == j)):
                sent = _fill(tpl, rng, spec.lexicon, category)
                sentences.insert(int(rng.integers(0, len(sentences) + 1)), sent)
        lead = rng.random() < spec.lead_rate
        slot = int(rng.integers(0, len(sentences) + 1))
        sentences.insert(0 if lead else slot, outcome)
        tokens = []
        for s in sentences:
            tokens.extend(s)
            tokens.append(".")
        if spec.noise_rate > 0:
            noisy = []
            for tok in tokens:
                noisy.append(tok)
                if rng.random() < spec.noise_rate:
                    noisy.append(spec.noise_vocab[int(rng.integers(0, len(spec.noise_vocab)))])
            tokens = noisy
        if spec.max_tokens is not None:
            tokens = tokens[:spec.max_tokens]
        reports.append(Report(" ".join(tokens), code, category))
    return reports


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------

# severity mix per dataset; B is split evenly between B1 and B2 and the
# harm mass [E-I] is spread with decreasing weight towards death
DS1_PRIORS = {"A": 0.393, "B1": 0.069, "B2": 0.069, "C": 0.199, "D": 0.131,
              "E": 0.070, "F": 0.040, "G": 0.015, "H": 0.009, "I": 0.005}
DS2_PRIORS = {"A": 0.117, "B1": 0.065, "B2": 0.064, "C": 0.404, "D": 0.316,
              "E": 0.017, "F": 0.010, "G": 0.004, "H": 0.002, "I": 0.001}

_LEXICON = {
    "pt": ["patient", "pt", "resident"],
    "staff": ["rn", "nurse", "tech", "md", "pharmacist", "aide", "charge nurse", "resident md"],
    "neg": ["no", "without", "denies", "negative for", "not"],
    "affirm": ["with", "showing", "reports", "positive for", "has"],
    "injury": ["injury", "fracture", "laceration", "bleeding", "bruising", "pain",
               "swelling", "hematoma", "skin tear", "abrasion", "redness", "wound"],
    "body": ["hip", "head", "arm", "wrist", "leg", "sacrum", "heel", "forehead",
             "shoulder", "knee", "back", "face"],
    "symptom": ["fever", "nausea", "dizziness", "shortness of breath", "headache",
                "confusion", "chills", "cough", "anxiety"],
    "filler": ["further", "any", "visible", "obvious", "apparent", "noted", "evident",
               "new", "acute", "significant", "reported", "observed", "at", "this", "time",
               "on", "exam", "initial", "assessment", "clear", "signs", "of", "the",
               "area", "immediately", "after", "event", "per", "report"],
    "med": ["heparin", "insulin", "metoprolol", "warfarin", "vancomycin", "morphine",
            "potassium", "lisinopril", "multivitamin", "antibiotic"],
    "equipment": ["pump", "bed alarm", "monitor", "wheelchair", "iv pole", "suction",
                  "glucometer", "call light", "scale", "lift"],
    "defect": ["malfunctioning", "unplugged", "broken", "missing", "expired", "mislabeled",
               "not working", "damaged"],
    "room": ["bathroom", "hallway", "room", "bedside", "chair", "shower", "stairwell"],
    "time": ["day shift", "night shift", "morning rounds", "evening", "handoff"],
    "unit": ["icu", "ed", "pacu", "med surg", "telemetry", "radiology", "lab", "or"],
}

_CONTEXT = {
    "Fall": ["{pt} found on floor in {room} during {time}",
             "{pt} was ambulating to {room} unassisted",
             "bed alarm was off and {pt} attempted to stand",
             "{staff} heard a noise and went to {room}"],
    "Skin/Tissue": ["{pt} turned every two hours per protocol",
                    "wound care performed on {body} by {staff}",
                    "pressure area on {body} checked during {time}",
                    "{pt} on specialty mattress"],
    "Medication/Fluid": ["{med} ordered by {staff} during {time}",
                         "{staff} administered {med} from the {equipment}",
                         "pharmacy verified {med} order",
                         "{med} dose was double checked at {time}"],
    "Lab/Specimen": ["specimen sent to {unit} during {time}",
                     "{staff} collected blood sample at bedside",
                     "specimen label printed for {pt}",
                     "lab called {staff} with results"],
    "Surgery/Procedure": ["{pt} taken to {unit} for procedure",
                          "time out performed by {staff}",
                          "procedure consent signed during {time}",
                          "instrument count completed in {unit}"],
    "Lines/Tubes/Drain": ["iv line placed in {body} by {staff}",
                          "drain output recorded during {time}",
                          "{equipment} connected to line",
                          "tube secured per protocol"],
    "Diagnostic Imaging": ["{pt} sent to radiology for imaging",
                           "contrast given by {staff} in {unit}",
                           "imaging order entered at {time}",
                           "transport brought {pt} back from radiology"],
    "Patient ID/Documentation": ["armband checked by {staff}",
                                 "chart reviewed during {time}",
                                 "order entered under wrong account",
                                 "{staff} documented in the chart"],
    "Airway Management": ["{pt} on ventilator in {unit}",
                          "{staff} suctioned airway during {time}",
                          "oxygen saturation monitored by {equipment}",
                          "respiratory therapy called to {unit}"],
    "Safety/Security": ["security called to {room}",
                        "{pt} agitated during {time}",
                        "visitor brought item to {room}",
                        "sitter at bedside per {staff}"],
}

_POLARITY_DISTRACTORS = [
    "{pt} {neg} {gap:0-5} {symptom}",
    "{pt} {affirm} {gap:0-5} {symptom}",
]

_DISTRACTORS = [
    "family {neg} {gap:0-2} concerns at {time}",
    "{staff} {affirm} {gap:0-2} questions about plan",
    "hx of {injury} to {body} last year",
    "{staff} notified and {pt} {gap:1-3} resting",
    "{equipment} checked during {time}",
    "{pt} transferred from {unit} earlier",
    # what went wrong, shared by every code
    "{equipment} found {defect} in {room}",
    "wrong {med} label discovered by {staff}",
    "{med} dose error found by {staff} on double check",
    "mislabeled specimen found by {staff}",
    "{pt} found unattended in {room} during {time}",
]

# Outcome sentences. Every harm frame has a no-harm twin that differs only in
# the polarity word, which sits up to seven filler tokens ahead of the injury
# term. Polarity distractors share the same opening, and the outcome displaces
# one distractor of its own polarity, so every report holds as many negated
# as affirmed "{pt} {P}" openings. Only the pairing of polarity with the
# injury term that follows it reveals the class.
_FRAMES = {
    "plain": "{pt} {P} {gap:0-5} {injury} to {body}",
    "late": "{pt} {P} {gap:0-5} {injury} after {med} given late",
    "monitor": "{pt} {P} {gap:0-5} {injury} to {body} , monitored for changes",
    "transfer": "{pt} {P} {gap:0-5} {injury} , transferred to {unit}",
    "rapid": "{pt} {P} {gap:0-5} {injury} , rapid response called",
    "code": "{pt} {P} {gap:0-5} {injury} , code called",
}


def _frames(polarity, *names):
    return [_FRAMES[n].replace("{P}", "{%s}" % polarity) for n in names]


_NEG_FRAMES = _frames("neg", *_FRAMES)


_OUTCOMES = {
    "A": list(_NEG_FRAMES),
    "B1": list(_NEG_FRAMES),
    "B2": list(_NEG_FRAMES),
    "C": _frames("neg", "plain", "late"),
    "D": _frames("neg", "monitor", "transfer", "rapid", "code"),
    "E": _frames("affirm", "plain", "late"),
    "F": _frames("affirm", "monitor"),
    "G": _frames("affirm", "transfer"),
    "H": _frames("affirm", "rapid"),
    "I": _frames("affirm", "code"),
}

# (frequency weight, harm ratio); ratios span the range from a pressure-ulcer
# heavy category down to nearly harm-free ones
_DS1_CATEGORIES = {
    "Skin/Tissue": (0.06, 0.53),
    "Surgery/Procedure": (0.07, 0.25),
    "Airway Management": (0.04, 0.22),
    "Lines/Tubes/Drain": (0.07, 0.20),
    "Fall": (0.16, 0.12),
    "Medication/Fluid": (0.22, 0.07),
    "Safety/Security": (0.08, 0.15),
    "Diagnostic Imaging": (0.06, 0.10),
    "Patient ID/Documentation": (0.10, 0.027),
    "Lab/Specimen": (0.14, 0.009),
}

_DS2_CATEGORIES = {
    "Fall": (0.20, 0.10),
    "Skin/Tissue": (0.10, 0.08),
    "Medication/Fluid": (0.30, 0.01),
    "Surgery/Procedure": (0.12, 0.06),
    "Lines/Tubes/Drain": (0.10, 0.03),
    "Lab/Specimen": (0.18, 0.01),
}

# One unique marker phrase per severity code; nothing else differs by class.
_SEPARABLE_OUTCOMES = {
    "A": ["unsafe condition identified alpha alpha"],
    "B1": ["chance catch bravo one one"],
    "B2": ["active recovery bravo two two"],
    "C": ["reached patient charlie charlie charlie"],
    "D": ["monitoring needed delta delta delta"],
    "E": ["temporary harm echo echo echo"],
    "F": ["prolonged hospitalization foxtrot foxtrot foxtrot"],
    "G": ["permanent harm golf golf golf"],
    "H": ["life sustaining hotel hotel hotel"],
    "I": ["death india india india india"],
}


def _spec(priors, categories, **kw):
    return GeneratorSpec(
        priors=dict(priors),
        templates={k: list(v) for k, v in _OUTCOMES.items()},
        lexicon={k: list(v) for k, v in _LEXICON.items()},
        categories=dict(categories),
        context={k: list(v) for k, v in _CONTEXT.items() if k in categories},
        distractors=list(_DISTRACTORS),
        fixed=list(_POLARITY_DISTRACTORS),
        displace={c: 1 if c in HARM_CODES else 0 for c in SEVERITY_CODES},
        **kw,
    )


def profile(name: str) -> GeneratorSpec:
    """Named generator settings: ``ds1_like``, ``ds2_like`` or ``separable``."""
    if name == "ds1_like":
        return _spec(DS1_PRIORS, _DS1_CATEGORIES, sentences=(1, 4), distractor_rate=0.5,
                     fixed_repeats=(1, 3), lead_rate=0.5,
                     noise_rate=0.02, noise_vocab=["um", "pls", "fyi", "asap", "x2", "q2h", "prn"],
                     max_tokens=None)
    if name == "ds2_like":
        return _spec(DS2_PRIORS, _DS2_CATEGORIES, sentences=(1, 4), distractor_rate=0.5,
                     fixed_repeats=(1, 2),
                     noise_rate=0.02, noise_vocab=["um", "pls", "fyi", "asap", "x2", "q2h", "prn"])
    if name == "separable":
        # every category at the corpus harm rate, so context says nothing about class
        cats = {k: (w, 0.5) for k, (w, _) in _DS1_CATEGORIES.items()}
        spec = _spec({c: 1.0 / len(SEVERITY_CODES) for c in SEVERITY_CODES}, cats,
                     sentences=(0, 2), distractor_rate=0.0)
        spec.templates = {k: list(v) for k, v in _SEPARABLE_OUTCOMES.items()}
        spec.fixed = []
        spec.displace = {}
        spec.priors = {"A": 0.125, "B1": 0.0625, "B2": 0.0625, "C": 0.125, "D": 0.125,
                       "E": 0.1, "F": 0.1, "G": 0.1, "H": 0.1, "I": 0.1}
        return spec
    raise ConfigError(f"unknown synthetic profile {name!r}; valid: ds1_like, ds2_like, separable")


PROFILES = ("ds1_like", "ds2_like", "separable")
