"""Q-value models over dialogue states.

Two families share one interface (init_params, q_sa, q_all, greedy):

DqnModel flattens the state into a documented multi-hot vector and runs a
two-layer MLP with one output per action. Domains outside the encoder
layout contribute nothing, which is exactly why this baseline cannot carry
a policy into a new domain.

DtqnModel factorizes both states and actions through four embedding
tables (domains, acts, slots, values) shared between the state and action
encoders. Each state category aggregates a per-domain residual block; each
action is a residual over the domains where its (act, slots) pattern
applies, anchored on its own domain; Q is bilinear between the two. New
ontology entries only append embedding rows, every matrix keeps its shape.
"""

from __future__ import annotations

import math

import numpy as np

from . import numgrad as ng
from .env import NO_RECORD, StateView
from .ontology import ActionSet, Ontology
from .numgrad import Graph, ParamStore, Var


def init_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_table(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.uniform(-0.1, 0.1, size=(rows, cols))


class MultiHotEncoder:
    """Fixed binary layout over a domain subset; unseen domains encode to zero.

    Segment order: outstanding requests (one bit per domain slot), informed
    slots, booking status one-hot, database bucket one-hot, last four
    system actions one-hot each, user action (acts then mentioned slots per
    domain), then per-domain active flags.
    """

    def __init__(self, ont: Ontology, actions: ActionSet, domains: tuple[int, ...] | None = None):
        self.ont = ont
        self.actions = actions
        self.domains = tuple(range(ont.n_domains)) if domains is None else tuple(domains)
        self._labels: list[str] = []
        self._slot_pos: dict[tuple[str, int, int], int] = {}
        self._seg_pos: dict[tuple[str, int], int] = {}
        for seg in ("request", "inform"):
            for d in self.domains:
                for s in ont.domains[d].slots:
                    self._slot_pos[(seg, d, s)] = len(self._labels)
                    self._labels.append(f"{seg}:{ont.domains[d].name}:{ont.slots[s].name}")
        for d in self.domains:
            if ont.domains[d].bookable:
                self._seg_pos[("book", d)] = len(self._labels)
                for st in ("none", "attempted", "confirmed"):
                    self._labels.append(f"book:{ont.domains[d].name}:{st}")
        for d in self.domains:
            self._seg_pos[("db", d)] = len(self._labels)
            for b in range(6):
                self._labels.append(f"db:{ont.domains[d].name}:bucket{b}")
        self._seg_pos[("history", 0)] = len(self._labels)
        for k in range(4):
            for a in range(len(actions)):
                self._labels.append(f"history{k}:{actions.describe(a)}")
        for d in self.domains:
            self._seg_pos[("user_act", d)] = len(self._labels)
            for a in ont.acts:
                self._labels.append(f"user:{ont.domains[d].name}:{a.name}")
            for s in ont.domains[d].slots:
                self._slot_pos[("user_slot", d, s)] = len(self._labels)
                self._labels.append(f"user:{ont.domains[d].name}:{ont.slots[s].name}")
        self._seg_pos[("active", 0)] = len(self._labels)
        for d in self.domains:
            self._labels.append(f"active:{ont.domains[d].name}")
        self.width = len(self._labels)

    def describe(self, bit: int) -> str:
        return self._labels[bit]

    def encode(self, view: StateView) -> np.ndarray:
        x = np.zeros(self.width)
        n_acts = len(self.ont.acts)
        for d in self.domains:
            for s in view.requests[d]:
                pos = self._slot_pos.get(("request", d, s))
                if pos is not None:
                    x[pos] = 1.0
            for s, _ in view.informs[d]:
                pos = self._slot_pos.get(("inform", d, s))
                if pos is not None:
                    x[pos] = 1.0
            bpos = self._seg_pos.get(("book", d))
            if bpos is not None:
                x[bpos + view.book[d]] = 1.0
            if view.db[d] != NO_RECORD:
                x[self._seg_pos[("db", d)] + view.db[d]] = 1.0
        hpos = self._seg_pos[("history", 0)]
        for k, a in enumerate(view.history):
            x[hpos + k * len(self.actions) + a] = 1.0
        for it in view.user.items:
            base = self._seg_pos.get(("user_act", it.domain))
            if base is None:
                continue
            x[base + it.act] = 1.0
            if it.slot >= 0:
                pos = self._slot_pos.get(("user_slot", it.domain, it.slot))
                if pos is not None:
                    x[pos] = 1.0
        apos = self._seg_pos[("active", 0)]
        for i, d in enumerate(self.domains):
            x[apos + i] = float(view.active[d])
        return x


class DqnModel:
    """Multi-hot state, two-layer MLP, one Q output per action."""

    kind = "dqn"

    def __init__(self, ont: Ontology, actions: ActionSet, hidden: int = 128,
                 domains: tuple[int, ...] | None = None):
        self.ont = ont
        self.actions = actions
        self.hidden = hidden
        self.encoder = MultiHotEncoder(ont, actions, domains)
        self.n_actions = len(actions)
        self._cache: tuple[int, dict] | None = None

    def init_params(self, seed: int) -> ParamStore:
        rng = np.random.default_rng(seed)
        p = ParamStore()
        p.add("dqn/w1", init_matrix(rng, self.hidden, self.encoder.width))
        p.add("dqn/b1", np.zeros(self.hidden))
        p.add("dqn/w2", init_matrix(rng, self.n_actions, self.hidden))
        p.add("dqn/b2", np.zeros(self.n_actions))
        return p

    def q_vector(self, leaves: dict[str, Var], view: StateView) -> Var:
        x = ng.const(self.encoder.encode(view))
        h = ng.relu(ng.add(ng.matmul(leaves["dqn/w1"], x), leaves["dqn/b1"]))
        return ng.add(ng.matmul(leaves["dqn/w2"], h), leaves["dqn/b2"])

    def q_sa(self, leaves: dict[str, Var], view: StateView, action: int, memo: dict) -> Var:
        key = ("qv", view)
        q = memo.get(key)
        if q is None:
            q = self.q_vector(leaves, view)
            memo[key] = q
        return ng.pick(q, action)

    def q_all(self, store: ParamStore, view: StateView) -> np.ndarray:
        x = self.encoder.encode(view)
        h = np.maximum(store["dqn/w1"] @ x + store["dqn/b1"], 0.0)
        return store["dqn/w2"] @ h + store["dqn/b2"]

    def greedy(self, store: ParamStore, view: StateView) -> int:
        return int(np.argmax(self.q_all(store, view)))


class DtqnModel:
    """Factorized state/action encoders with a bilinear Q head."""

    kind = "dtqn"
    FLAT_CATEGORIES = ("request", "inform", "book", "database")

    def __init__(self, ont: Ontology, actions: ActionSet, d_e: int = 16, d_s: int = 64):
        self.ont = ont
        self.actions = actions
        self.d_e = d_e
        self.d_s = d_s
        self.d_a = 3 * d_e
        self.n_actions = len(actions)
        self.null_slot = len(ont.slots)          # last slot-table row
        self.flat_width = 2 * d_e + 1
        self.user_width = 3 * d_e + 1
        self.concat_width = 4 * self.flat_width + self.user_width + self.d_a
        self.all_domains = tuple(range(ont.n_domains))
        self.book_domains = ont.bookable_domains()
        # detached-evaluation caches, keyed by store stamp; several live
        # stores (online, target, per-task copies) coexist during training
        self._nograd: dict[tuple[int, int], dict] = {}
        self._amatrix: dict[tuple[int, int], np.ndarray] = {}
        self._build_action_layout()

    def _build_action_layout(self) -> None:
        """Flatten every action's (act, slots, relevant domains) structure
        into index arrays so the detached action matrix is a handful of
        numpy calls instead of one small graph per action row."""
        n_slot_rows = len(self.ont.slots) + 1
        specs = self.actions.specs
        slot_mix = np.zeros((self.n_actions, n_slot_rows))
        act_of = np.zeros(self.n_actions, dtype=np.intp)
        pair_dom: list[int] = []
        pair_act: list[int] = []
        offsets = np.zeros(self.n_actions, dtype=np.intp)
        counts = np.zeros(self.n_actions, dtype=np.intp)
        anchor = np.full(self.n_actions, -1, dtype=np.intp)
        for i, spec in enumerate(specs):
            act_of[i] = spec.act
            if spec.slots:
                slot_mix[i, list(spec.slots)] = 1.0 / len(spec.slots)
            else:
                slot_mix[i, self.null_slot] = 1.0
            offsets[i] = len(pair_dom)
            counts[i] = len(spec.relevant)
            for dom in spec.relevant:
                if spec.domain is not None and dom == spec.domain:
                    anchor[i] = len(pair_dom)
                pair_dom.append(dom)
                pair_act.append(i)
        self._act_of = act_of
        self._slot_mix = slot_mix
        self._pair_dom = np.asarray(pair_dom, dtype=np.intp)
        self._pair_act = np.asarray(pair_act, dtype=np.intp)
        self._pair_offsets = offsets
        self._pair_counts = counts
        self._anchor = anchor

    def init_params(self, seed: int) -> ParamStore:
        rng = np.random.default_rng(seed)
        p = ParamStore()
        p.add("emb/domain", init_table(rng, self.ont.n_domains, self.d_e))
        p.add("emb/act", init_table(rng, len(self.ont.acts), self.d_e))
        p.add("emb/slot", init_table(rng, len(self.ont.slots) + 1, self.d_e))
        p.add("emb/value", init_table(rng, len(self.ont.values), self.d_e))
        p.add("db_proj/w", init_matrix(rng, self.d_e, 6))
        for cat in self.FLAT_CATEGORIES:
            p.add(f"cat/{cat}/w", init_matrix(rng, self.flat_width, self.flat_width))
            p.add(f"cat/{cat}/b", np.zeros(self.flat_width))
        p.add("cat/user/w", init_matrix(rng, self.user_width, self.user_width))
        p.add("cat/user/b", np.zeros(self.user_width))
        p.add("state/w", init_matrix(rng, self.d_s, self.concat_width))
        p.add("action/w", init_matrix(rng, self.d_a, self.d_a))
        p.add("action/b", np.zeros(self.d_a))
        p.add("head/wq", init_matrix(rng, self.d_a, self.d_s))
        return p

    # -- shared building blocks ------------------------------------------

    def _residual(self, leaves, cat: str, shat: Var) -> Var:
        w, b = leaves[f"cat/{cat}/w"], leaves[f"cat/{cat}/b"]
        return ng.add(shat, ng.relu(ng.add(ng.matmul(w, shat), b)))

    def _slot_mean(self, leaves, slots) -> Var:
        if not slots:
            return ng.embed_lookup(leaves["emb/slot"], self.null_slot)
        rows = [ng.embed_lookup(leaves["emb/slot"], s) for s in slots]
        return rows[0] if len(rows) == 1 else ng.mean_rows(rows)

    def _pair_mean(self, leaves, pairs) -> Var:
        rows = []
        for s, v in pairs:
            sl = ng.embed_lookup(leaves["emb/slot"], s)
            rows.append(ng.hadamard(sl, ng.embed_lookup(leaves["emb/value"], v)) if v >= 0 else sl)
        return rows[0] if len(rows) == 1 else ng.mean_rows(rows)

    def _flat_term(self, leaves, cat: str, view: StateView, d: int, memo: dict) -> Var:
        if cat == "request":
            key = ("request", d, view.requests[d], view.active[d])
        elif cat == "inform":
            key = ("inform", d, view.informs[d], view.active[d])
        elif cat == "book":
            key = ("book", d, view.book[d])
        else:
            key = ("database", d, view.db[d], view.active[d])
        out = memo.get(key)
        if out is not None:
            return out
        dvec = ng.embed_lookup(leaves["emb/domain"], d)
        u = ng.const(np.array([float(view.active[d])]))
        if cat == "request":
            slots = view.requests[d]
            mid = self._pair_mean(leaves, [(s, -1) for s in slots]) if slots \
                else ng.const(np.zeros(self.d_e))
            shat = ng.concat([dvec, mid, u])
        elif cat == "inform":
            pairs = view.informs[d]
            mid = self._pair_mean(leaves, pairs) if pairs else ng.const(np.zeros(self.d_e))
            shat = ng.concat([dvec, mid, u])
        elif cat == "book":
            status = ng.const(np.array([view.book[d] / 2.0]))
            shat = ng.concat([dvec, self._slot_mean(leaves, ()), status])
        else:
            bucket = view.db[d]
            if bucket == NO_RECORD:
                mid = ng.const(np.zeros(self.d_e))
            else:
                onehot = np.zeros(6)
                onehot[bucket] = 1.0
                mid = ng.matmul(leaves["db_proj/w"], ng.const(onehot))
            shat = ng.concat([dvec, mid, u])
        out = self._residual(leaves, cat, shat)
        memo[key] = out
        return out

    def _user_term(self, leaves, view: StateView, d: int, memo: dict) -> Var:
        items = tuple(it for it in view.user.items if it.domain == d)
        key = ("user", d, items, view.active[d])
        out = memo.get(key)
        if out is not None:
            return out
        dvec = ng.embed_lookup(leaves["emb/domain"], d)
        u = ng.const(np.array([float(view.active[d])]))
        if items:
            acts = [ng.embed_lookup(leaves["emb/act"], it.act) for it in items]
            avec = acts[0] if len(acts) == 1 else ng.mean_rows(acts)
            pairs = [(it.slot, it.value) for it in items if it.slot >= 0]
            pvec = self._pair_mean(leaves, pairs) if pairs else ng.const(np.zeros(self.d_e))
        else:
            avec = ng.const(np.zeros(self.d_e))
            pvec = ng.const(np.zeros(self.d_e))
        out = self._residual(leaves, "user", ng.concat([dvec, avec, pvec, u]))
        memo[key] = out
        return out

    def action_row(self, leaves, idx: int, memo: dict) -> Var:
        key = ("arow", idx)
        out = memo.get(key)
        if out is not None:
            return out
        spec = self.actions.specs[idx]
        omean = self._slot_mean(leaves, spec.slots)
        cvec = ng.embed_lookup(leaves["emb/act"], spec.act)
        w, b = leaves["action/w"], leaves["action/b"]

        def block(dom: int) -> Var:
            ahat = ng.concat([ng.embed_lookup(leaves["emb/domain"], dom), cvec, omean])
            return ng.add(ahat, ng.relu(ng.add(ng.matmul(w, ahat), b)))

        blocks = {dom: block(dom) for dom in spec.relevant}
        vals = list(blocks.values())
        agg = vals[0] if len(vals) == 1 else ng.mean_rows(vals)
        if spec.domain is None:
            out = agg
        else:
            # anchor on the action's own domain so same-pattern actions in
            # different domains stay distinguishable
            out = ng.add(ng.scalar_scale(blocks[spec.domain], 0.5), ng.scalar_scale(agg, 0.5))
        memo[key] = out
        return out

    def encode_state(self, leaves, view: StateView, memo: dict) -> Var:
        parts = []
        for cat in ("request", "inform"):
            terms = [self._flat_term(leaves, cat, view, d, memo) for d in self.all_domains]
            parts.append(ng.mean_rows(terms))
        if self.book_domains:
            terms = [self._flat_term(leaves, "book", view, d, memo) for d in self.book_domains]
            parts.append(ng.mean_rows(terms))
        else:
            parts.append(ng.const(np.zeros(self.flat_width)))
        terms = [self._flat_term(leaves, "database", view, d, memo) for d in self.all_domains]
        parts.append(ng.mean_rows(terms))
        terms = [self._user_term(leaves, view, d, memo) for d in self.all_domains]
        parts.append(ng.mean_rows(terms))
        if view.history:
            rows = [self.action_row(leaves, h, memo) for h in view.history]
            parts.append(ng.mean_rows(rows))
        else:
            parts.append(ng.const(np.zeros(self.d_a)))
        return ng.relu(ng.matmul(leaves["state/w"], ng.concat(parts)))

    # -- training-side (graph) and evaluation-side (detached) entry points

    def q_sa(self, leaves, view: StateView, action: int, memo: dict) -> Var:
        skey = ("state", view)
        s = memo.get(skey)
        if s is None:
            s = self.encode_state(leaves, view, memo)
            memo[skey] = s
        row = self.action_row(leaves, action, memo)
        return ng.scalar_scale(ng.matmul(row, ng.matmul(leaves["head/wq"], s)),
                               1.0 / math.sqrt(self.d_a))

    def _detached(self, store: ParamStore) -> tuple[dict, dict]:
        box = self._nograd.pop(store.stamp, None)
        if box is None:
            while len(self._nograd) >= 8:
                self._nograd.pop(next(iter(self._nograd)))
            leaves = {name: Var(arr) for name, arr in store.items()}
            box = {"leaves": leaves, "memo": {}}
        self._nograd[store.stamp] = box      # most recently used last
        return box["leaves"], box["memo"]

    def action_matrix(self, store: ParamStore) -> np.ndarray:
        mat = self._amatrix.pop(store.stamp, None)
        if mat is None:
            while len(self._amatrix) >= 8:
                self._amatrix.pop(next(iter(self._amatrix)))
            leaves, memo = self._detached(store)
            mat = np.stack([self.action_row(leaves, i, memo).data
                            for i in range(self.n_actions)])
        self._amatrix[store.stamp] = mat
        return mat

    def q_all(self, store: ParamStore, view: StateView) -> np.ndarray:
        leaves, memo = self._detached(store)
        skey = ("state", view)
        s = memo.get(skey)
        if s is None:
            s = self.encode_state(leaves, view, memo)
            memo[skey] = s
        return (self.action_matrix(store) @ (store["head/wq"] @ s.data)) / math.sqrt(self.d_a)

    def greedy(self, store: ParamStore, view: StateView) -> int:
        return int(np.argmax(self.q_all(store, view)))


def grow_tables(model: DtqnModel, store: ParamStore, new_model: DtqnModel,
                seed: int) -> ParamStore:
    """Carry parameters onto an extended ontology.

    Registries of the new model must extend the old ones as a prefix.
    Matrix parameters copy over unchanged; embedding tables gain freshly
    initialized rows for the new entries (the slot table keeps its
    learned null row last).
    """
    old, new = model.ont, new_model.ont
    for a, b in zip(old.domains, new.domains):
        if a.name != b.name:
            raise ValueError("domain registry is not a prefix of the new ontology")
    for a, b in zip(old.slots, new.slots):
        if a.name != b.name:
            raise ValueError("slot registry is not a prefix of the new ontology")
    rng = np.random.default_rng(seed)
    out = ParamStore()
    for name, arr in store.items():
        out.add(name, arr)

    def grown(name: str, n_new: int, keep_last: bool = False) -> None:
        tbl = store[name]
        if n_new == 0:
            return
        fresh = init_table(rng, n_new, model.d_e)
        if keep_last:
            stacked = np.vstack([tbl[:-1], fresh, tbl[-1:]])
        else:
            stacked = np.vstack([tbl, fresh])
        out.set_(name, stacked)

    grown("emb/domain", new.n_domains - old.n_domains)
    grown("emb/act", len(new.acts) - len(old.acts))
    grown("emb/slot", len(new.slots) - len(old.slots), keep_last=True)
    grown("emb/value", len(new.values) - len(old.values))
    return out
