"""Domain ontology: registries, flat action set, goals and tasks.

An ontology file is JSON (format "metapol-ontology", version 1) with five
sections:

  acts          [{"name", "takes_slot", "bookable_only", "global"}]
  slots         [{"name", "values": [str, ...]}]
  domains       [{"name", "slots", "essential", "bookable"}]
  compositions  [[domain, ...], ...]   goals may span these domain groups
  entities      {domain: [{slot: value, ...}, ...]}   backing database rows

Handles are dense integers assigned in file order. Slot names are global:
declaring "time" under two domains yields one handle, so the same slot
embedding row serves both. Value strings are likewise registered globally.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class OntologyError(Exception):
    """Malformed ontology file or inconsistent reference."""


@dataclass(frozen=True)
class ActDef:
    name: str
    takes_slot: bool = False
    bookable_only: bool = False
    global_: bool = False


@dataclass(frozen=True)
class SlotDef:
    name: str
    values: tuple[int, ...]          # handles into the global value registry


@dataclass(frozen=True)
class DomainDef:
    name: str
    slots: tuple[int, ...]
    essential: tuple[int, ...]
    bookable: bool


@dataclass(frozen=True)
class ActionSpec:
    """One flat system action.

    domain is None for globally applicable acts such as bye. relevant
    holds every domain where the same (act, slots) pattern is applicable;
    the action's own domain is always a member when it has one.
    """
    domain: int | None
    act: int
    slots: tuple[int, ...]
    relevant: tuple[int, ...]


class Ontology:
    """Immutable registries plus lookup helpers."""

    def __init__(self, acts: list[ActDef], slots: list[SlotDef], values: list[str],
                 domains: list[DomainDef], compositions: list[tuple[int, ...]]):
        self.acts = tuple(acts)
        self.slots = tuple(slots)
        self.values = tuple(values)
        self.domains = tuple(domains)
        self.compositions = tuple(compositions)
        self.act_index = {a.name: i for i, a in enumerate(acts)}
        self.slot_index = {s.name: i for i, s in enumerate(slots)}
        self.value_index = {v: i for i, v in enumerate(values)}
        self.domain_index = {d.name: i for i, d in enumerate(domains)}

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    def domain_handle(self, name: str) -> int:
        try:
            return self.domain_index[name]
        except KeyError:
            raise OntologyError(f"unknown domain {name!r}") from None

    def slot_handle(self, name: str) -> int:
        try:
            return self.slot_index[name]
        except KeyError:
            raise OntologyError(f"unknown slot {name!r}") from None

    def act_handle(self, name: str) -> int:
        try:
            return self.act_index[name]
        except KeyError:
            raise OntologyError(f"unknown act {name!r}") from None

    def bookable_domains(self) -> tuple[int, ...]:
        return tuple(i for i, d in enumerate(self.domains) if d.bookable)

    def domain_acts(self, domain: int) -> tuple[int, ...]:
        """Acts applicable inside one domain (global acts excluded)."""
        d = self.domains[domain]
        out = []
        for i, a in enumerate(self.acts):
            if a.global_:
                continue
            if a.bookable_only and not d.bookable:
                continue
            out.append(i)
        return tuple(out)

    def compositions_with(self, seed: int, pool: tuple[int, ...] | None = None) -> tuple[tuple[int, ...], ...]:
        out = []
        for comp in self.compositions:
            if seed not in comp:
                continue
            if pool is not None and not set(comp) <= set(pool):
                continue
            out.append(comp)
        return tuple(out)


def _registry_checked(entries, kind: str) -> None:
    seen = set()
    for name in entries:
        if name in seen:
            raise OntologyError(f"duplicate {kind} {name!r}")
        seen.add(name)


def ontology_from_dict(doc: dict) -> Ontology:
    """Build and validate an Ontology from parsed JSON."""
    if doc.get("format") != "metapol-ontology":
        raise OntologyError("not a metapol-ontology document")
    if doc.get("version") != 1:
        raise OntologyError(f"unsupported ontology version {doc.get('version')!r}")

    acts = []
    for a in doc.get("acts", []):
        acts.append(ActDef(a["name"], bool(a.get("takes_slot", False)),
                           bool(a.get("bookable_only", False)), bool(a.get("global", False))))
    if not acts:
        raise OntologyError("no acts declared")
    _registry_checked([a.name for a in acts], "act")

    # slot declarations dedupe by name; a repeat must carry the same values
    values: list[str] = []
    value_index: dict[str, int] = {}
    slots: list[SlotDef] = []
    slot_index: dict[str, int] = {}
    for s in doc.get("slots", []):
        name = s["name"]
        vals = list(s.get("values", []))
        if not vals:
            raise OntologyError(f"slot {name!r} has an empty value set")
        handles = []
        for v in vals:
            v = str(v)
            if v not in value_index:
                value_index[v] = len(values)
                values.append(v)
            handles.append(value_index[v])
        if name in slot_index:
            if slots[slot_index[name]].values != tuple(handles):
                raise OntologyError(f"slot {name!r} redeclared with different values")
            continue
        slot_index[name] = len(slots)
        slots.append(SlotDef(name, tuple(handles)))
    if not slots:
        raise OntologyError("no slots declared")

    domains = []
    for d in doc.get("domains", []):
        name = d["name"]
        slot_names = d.get("slots", [])
        if not slot_names:
            raise OntologyError(f"domain {name!r} declares no slots")
        for sn in slot_names:
            if sn not in slot_index:
                raise OntologyError(f"domain {name!r} references undeclared slot {sn!r}")
        ess = d.get("essential", [])
        for sn in ess:
            if sn not in slot_names:
                raise OntologyError(f"essential slot {sn!r} not among {name!r} slots")
        domains.append(DomainDef(name, tuple(slot_index[sn] for sn in slot_names),
                                 tuple(slot_index[sn] for sn in ess), bool(d.get("bookable", False))))
    if not domains:
        raise OntologyError("no domains declared")
    _registry_checked([d.name for d in domains], "domain")
    domain_index = {d.name: i for i, d in enumerate(domains)}

    comps = []
    for comp in doc.get("compositions", []):
        if not comp or len(comp) > 3:
            raise OntologyError(f"composition size out of range: {comp!r}")
        if len(set(comp)) != len(comp):
            raise OntologyError(f"composition repeats a domain: {comp!r}")
        for dn in comp:
            if dn not in domain_index:
                raise OntologyError(f"composition references unknown domain {dn!r}")
        comps.append(tuple(domain_index[dn] for dn in comp))
    if not comps:
        comps = [(i,) for i in range(len(domains))]

    return Ontology(acts, slots, values, domains, comps)


def load_ontology(path) -> Ontology:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return ontology_from_dict(doc)


def builtin_ontology_path() -> Path:
    return Path(__file__).parent / "data" / "multiwoz_like.ont"


def enumerate_actions(ont: Ontology) -> "ActionSet":
    """Flatten the ontology into the action list shared by every policy.

    One action per (domain, act, slot group); slot-taking acts get one
    action per applicable slot, others an empty group. Global acts are
    enumerated once with every domain relevant. Ordering follows the
    registries, so handles are stable for a given file.
    """
    pattern_domains: dict[tuple[int, tuple[int, ...]], list[int]] = {}
    triples: list[tuple[int | None, int, tuple[int, ...]]] = []
    for di, dom in enumerate(ont.domains):
        for ai in ont.domain_acts(di):
            act = ont.acts[ai]
            groups = [(s,) for s in dom.slots] if act.takes_slot else [()]
            for grp in groups:
                triples.append((di, ai, grp))
                pattern_domains.setdefault((ai, grp), []).append(di)
    all_domains = tuple(range(ont.n_domains))
    specs = [ActionSpec(d, a, g, tuple(pattern_domains[(a, g)])) for d, a, g in triples]
    for ai, act in enumerate(ont.acts):
        if act.global_:
            specs.append(ActionSpec(None, ai, (), all_domains))
    return ActionSet(ont, tuple(specs))


class ActionSet:
    def __init__(self, ont: Ontology, specs: tuple[ActionSpec, ...]):
        self.ont = ont
        self.specs = specs
        self._by_triple = {(s.domain, s.act, s.slots): i for i, s in enumerate(specs)}

    def __len__(self) -> int:
        return len(self.specs)

    def handle(self, domain: int | None, act: int, slots: tuple[int, ...] = ()) -> int:
        try:
            return self._by_triple[(domain, act, slots)]
        except KeyError:
            raise OntologyError(f"no action ({domain}, {act}, {slots})") from None

    def describe(self, handle: int) -> str:
        s = self.specs[handle]
        dom = "*" if s.domain is None else self.ont.domains[s.domain].name
        slot = ",".join(self.ont.slots[x].name for x in s.slots)
        body = f"{self.ont.acts[s.act].name}({slot})" if slot else self.ont.acts[s.act].name
        return f"{dom}:{body}"


@dataclass(frozen=True)
class DomainGoal:
    """What the user wants inside one domain."""
    constraints: tuple[tuple[int, int], ...]   # (slot, value) pairs, slot-sorted
    requests: tuple[int, ...]                  # slots to ask the system for
    booking: bool
    no_offer: bool = False


@dataclass(frozen=True)
class Goal:
    composition: tuple[int, ...]
    parts: dict[int, DomainGoal] = field(hash=False, default_factory=dict)


@dataclass(frozen=True)
class TaskSpec:
    """A dialogue task: a seed domain plus the composition scope.

    mode "single" pins the composition to the seed alone; "composite"
    samples uniformly from the ontology compositions containing the seed,
    optionally restricted to a domain pool. composition None means
    not yet resolved; resolve() fills it per episode.
    """
    seed: int
    mode: str = "single"
    composition: tuple[int, ...] | None = None
    pool: tuple[int, ...] | None = None

    def resolve(self, ont: Ontology, rng: np.random.Generator) -> "TaskSpec":
        if self.mode == "single":
            return replace(self, composition=(self.seed,))
        if self.mode != "composite":
            raise OntologyError(f"unknown task mode {self.mode!r}")
        cands = ont.compositions_with(self.seed, self.pool)
        if not cands:
            raise OntologyError(f"no compositions contain domain {self.seed}")
        comp = cands[int(rng.integers(len(cands)))]
        return replace(self, composition=comp)


class Database:
    """Entity rows per domain, seeded from the ontology file."""

    BUCKETS = 6    # match counts 0..4 and >=5

    def __init__(self, ont: Ontology, entities: dict[int, list[dict[int, int]]]):
        self.ont = ont
        self.entities = {d: tuple(dict(e) for e in rows) for d, rows in entities.items()}
        for d in range(ont.n_domains):
            self.entities.setdefault(d, ())

    @staticmethod
    def from_file(path, ont: Ontology) -> "Database":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        ents: dict[int, list[dict[int, int]]] = {}
        for dname, rows in doc.get("entities", {}).items():
            d = ont.domain_handle(dname)
            dom = ont.domains[d]
            out = []
            for row in rows:
                rec = {}
                for sn, vv in row.items():
                    s = ont.slot_handle(sn)
                    if s not in dom.slots:
                        raise OntologyError(f"entity slot {sn!r} not in domain {dname!r}")
                    vv = str(vv)
                    if ont.value_index.get(vv) is None or ont.value_index[vv] not in ont.slots[s].values:
                        raise OntologyError(f"entity value {vv!r} not declared for slot {sn!r}")
                    rec[s] = ont.value_index[vv]
                missing = [sn for sn in dom.slots if sn not in rec]
                if missing:
                    raise OntologyError(f"entity in {dname!r} missing slots {missing}")
                out.append(rec)
            ents[d] = out
        return Database(ont, ents)

    def matches(self, domain: int, constraints) -> list[int]:
        out = []
        for i, ent in enumerate(self.entities[domain]):
            if all(ent.get(s) == v for s, v in constraints):
                out.append(i)
        return out

    def query(self, domain: int, constraints) -> int:
        """Number of matching entities, exact conjunctive match."""
        return len(self.matches(domain, constraints))

    def first_match(self, domain: int, constraints) -> dict[int, int] | None:
        for ent in self.entities[domain]:
            if all(ent.get(s) == v for s, v in constraints):
                return ent
        return None

    @staticmethod
    def bucket(count: int) -> int:
        return count if count < 5 else 5


def sample_goal(ont: Ontology, db: Database, task: TaskSpec, rng: np.random.Generator,
                no_offer_prob: float = 0.1) -> Goal:
    """Draw a satisfiable goal for a resolved task.

    Constraints copy slot values from a concrete database entity so a
    match always exists, except when a domain is flagged no-offer: then an
    unmatched constraint combination is searched for (falling back to a
    satisfiable one when the table is too dense to miss).
    """
    if task.composition is None:
        raise OntologyError("task composition not resolved")
    parts = {}
    for d in task.composition:
        dom = ont.domains[d]
        requestable = [s for s in dom.slots if s not in dom.essential]
        no_offer = bool(dom.essential) and rng.random() < no_offer_prob
        constraints = None
        if no_offer:
            constraints = _unsatisfiable_constraints(ont, db, d, rng)
            no_offer = constraints is not None
        if constraints is None:
            ents = db.entities[d]
            if not ents:
                raise OntologyError(f"no entities for domain {dom.name!r}")
            ent = ents[int(rng.integers(len(ents)))]
            pool = [s for s in requestable if len(ont.slots[s].values) > 1]
            n_extra = int(rng.integers(0, min(2, max(0, len(pool) - 1)) + 1))
            extra = [int(x) for x in rng.choice(pool, size=n_extra, replace=False)] if n_extra else []
            constraints = tuple(sorted((int(s), int(ent[s])) for s in list(dom.essential) + extra))
        taken = {s for s, _ in constraints}
        req_pool = [s for s in requestable if s not in taken]
        if not req_pool:
            req_pool = [s for s in dom.slots if s not in taken] or list(dom.slots)
        n_req = int(rng.integers(1, min(2, len(req_pool)) + 1))
        requests = tuple(sorted(int(x) for x in rng.choice(req_pool, size=n_req, replace=False)))
        booking = bool(dom.bookable and not no_offer and rng.random() < 0.5)
        parts[d] = DomainGoal(constraints, requests, booking, no_offer)
    return Goal(tuple(task.composition), parts)


def _unsatisfiable_constraints(ont, db, domain, rng, tries: int = 50):
    dom = ont.domains[domain]
    ess = list(dom.essential)
    for _ in range(tries):
        cons = tuple(sorted((s, int(rng.choice(ont.slots[s].values))) for s in ess))
        if db.query(domain, cons) == 0:
            return cons
    return None
