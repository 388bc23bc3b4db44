"""Synthetic multi-domain dialogue environment.

One episode is a conversation between a goal-driven simulated user and the
system policy under evaluation. The system moves first each turn; the user
answers, pushes its own agenda, and hangs up either satisfied (every
constraint informed, every request answered, bookings confirmed) or out of
patience. Per-turn reward is -1, with +2L added on success and -L on
failure, L being the turn limit, so a successful episode totals 2L - turns
and a failed one -L - turns.

The observable dialogue state has six categories: outstanding user
requests, informed constraints, booking status, latest database result
bucket, the last four system actions, and the most recent user action.
The user's goal itself is never part of the state.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ontology import (ActionSet, Database, DomainGoal, Goal, Ontology,
                       OntologyError, TaskSpec, sample_goal)

BOOK_NONE, BOOK_ATTEMPTED, BOOK_CONFIRMED = 0, 1, 2
NO_RECORD = -1          # database category before the first lookup in a domain
HISTORY_LEN = 4
DEFAULT_PATIENCE = 6
DEFAULT_MAX_TURNS = 40


class EnvError(Exception):
    """Stepping a finished episode or feeding an unknown action."""


@dataclass(frozen=True)
class UserItem:
    domain: int
    act: int
    slot: int = -1
    value: int = -1


@dataclass(frozen=True)
class UserAction:
    items: tuple[UserItem, ...]
    terminal: bool = False


@dataclass(frozen=True)
class StateView:
    """Hashable snapshot of the tracked dialogue state.

    Per-domain tuples are indexed by domain handle. informs holds
    slot-sorted (slot, value) pairs; requests holds slot-sorted
    outstanding user requests; db is a result bucket or NO_RECORD;
    history lists up to the last four system action handles, oldest
    first. active mirrors "all essential slots informed".
    """
    t: int
    requests: tuple[tuple[int, ...], ...]
    informs: tuple[tuple[tuple[int, int], ...], ...]
    book: tuple[int, ...]
    db: tuple[int, ...]
    history: tuple[int, ...]
    user: UserAction
    active: tuple[int, ...]


@dataclass(frozen=True)
class Transition:
    task: int                 # seed domain of the task that produced it
    s: StateView
    a: int
    r: float
    s_next: StateView
    done: bool


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    turns: int
    total_reward: float


class Tracker:
    """Mutable record of what has been said; snapshots via view()."""

    def __init__(self, ont: Ontology):
        self.ont = ont
        n = ont.n_domains
        self.t = 0
        self.requests: list[set[int]] = [set() for _ in range(n)]
        self.informs: list[dict[int, int]] = [dict() for _ in range(n)]
        self.book: list[int] = [BOOK_NONE] * n
        self.db: list[int] = [NO_RECORD] * n
        self.queried: set[int] = set()
        self.history: deque[int] = deque(maxlen=HISTORY_LEN)
        self.user: UserAction = UserAction(())

    def active_flags(self) -> tuple[int, ...]:
        out = []
        for d, dom in enumerate(self.ont.domains):
            filled = all(s in self.informs[d] for s in dom.essential)
            out.append(1 if filled else 0)
        return tuple(out)

    def view(self) -> StateView:
        return StateView(
            t=self.t,
            requests=tuple(tuple(sorted(r)) for r in self.requests),
            informs=tuple(tuple(sorted(i.items())) for i in self.informs),
            book=tuple(self.book),
            db=tuple(self.db),
            history=tuple(self.history),
            user=self.user,
            active=self.active_flags(),
        )

    def refresh_db(self, db: Database) -> None:
        for d in self.queried:
            count = db.query(d, tuple(self.informs[d].items()))
            self.db[d] = Database.bucket(count)


@dataclass
class _SystemEffect:
    """What applying one system action did, for the user to judge."""
    domain: int | None = None
    requested_slot: int | None = None
    informed: tuple[int, int] | None = None     # (slot, value) actually delivered
    inform_failed: bool = False                 # inform attempted with zero matches
    booked: bool = False
    confirmed: bool = False
    no_offer: bool = False
    db_count: int = 0
    bye: bool = False


class UserSimulator:
    """Agenda-style user: answers first, then pursues its own items.

    Per domain the agenda runs constraints -> requests -> booking, in
    composition order. Requests are issued only once every constraint is
    informed, so an answered request always reflects the final constraint
    set. patience consecutive unhelpful system turns end the dialogue.
    """

    def __init__(self, ont: Ontology, goal: Goal, patience: int = DEFAULT_PATIENCE):
        self.ont = ont
        self.goal = goal
        self.patience_limit = patience
        self.patience = 0
        self.inform_act = ont.act_handle("inform")
        self.request_act = ont.act_handle("request")
        self.book_act = ont.act_handle("book")
        self.bye_act = ont.act_handle("bye")
        self._informs_pending: dict[int, list[tuple[int, int]]] = {}
        self._requests_pending: dict[int, list[int]] = {}
        self._outstanding: dict[int, list[int]] = {}
        self._answered: dict[int, set[int]] = {}
        self._constraints: dict[int, dict[int, int]] = {}
        self._booking_confirmed: dict[int, bool] = {}
        self._no_offer_reported: dict[int, bool] = {}
        for d in goal.composition:
            part = goal.parts[d]
            self._informs_pending[d] = list(part.constraints)
            self._requests_pending[d] = list(part.requests)
            self._outstanding[d] = []
            self._answered[d] = set()
            self._constraints[d] = dict(part.constraints)
            self._booking_confirmed[d] = False
            self._no_offer_reported[d] = False

    def domain_complete(self, d: int, book_status: int) -> bool:
        part = self.goal.parts[d]
        informed = not self._informs_pending[d]
        if part.no_offer:
            return informed and self._no_offer_reported[d]
        answered = self._answered[d] >= set(part.requests)
        booked = (not part.booking) or book_status == BOOK_CONFIRMED
        return informed and answered and booked

    def all_complete(self, tracker: Tracker) -> bool:
        return all(self.domain_complete(d, tracker.book[d]) for d in self.goal.composition)

    def opening(self) -> UserAction:
        return UserAction((self._next_initiative(),))

    def _judge(self, eff: _SystemEffect, tracker: Tracker) -> bool:
        d = eff.domain
        if d is None or d not in self.goal.parts:
            return False
        part = self.goal.parts[d]
        if eff.requested_slot is not None:
            # asking again for something already given is not progress
            return any(s == eff.requested_slot for s, _ in self._informs_pending[d])
        if eff.informed is not None:
            slot, _ = eff.informed
            if slot in self._outstanding[d]:
                self._outstanding[d].remove(slot)
                self._answered[d].add(slot)
                return True
            return False
        if eff.booked:
            return part.booking
        if eff.confirmed:
            if part.booking:
                self._booking_confirmed[d] = True
                return True
            return False
        if eff.no_offer:
            if (part.no_offer and not self._no_offer_reported[d]
                    and not self._informs_pending[d] and eff.db_count == 0):
                self._no_offer_reported[d] = True
                return True
            return False
        return False

    def _next_initiative(self) -> UserItem:
        for d in self.goal.composition:
            part = self.goal.parts[d]
            if self._informs_pending[d]:
                slot, value = self._informs_pending[d].pop(0)
                return UserItem(d, self.inform_act, slot, value)
            if part.no_offer and self._no_offer_reported[d]:
                continue    # moot requests, domain is closed
            if self._requests_pending[d]:
                slot = self._requests_pending[d].pop(0)
                self._outstanding[d].append(slot)
                return UserItem(d, self.request_act, slot)
            if self._outstanding[d]:
                return UserItem(d, self.request_act, self._outstanding[d][0])
            if not part.no_offer and part.booking and not self._booking_confirmed[d]:
                return UserItem(d, self.book_act)
        # nothing pending anywhere: satisfied bye, caller checks completion
        return UserItem(self.goal.composition[0], self.bye_act)

    def _note_informed(self, d: int, slot: int) -> None:
        self._informs_pending[d] = [(s, v) for s, v in self._informs_pending[d] if s != slot]

    def respond(self, eff: _SystemEffect, tracker: Tracker) -> UserAction:
        helpful = self._judge(eff, tracker)
        if helpful:
            self.patience = 0
        else:
            self.patience += 1
            if self.patience >= self.patience_limit:
                return UserAction((UserItem(self.goal.composition[0], self.bye_act),), terminal=True)
        if self.all_complete(tracker):
            return UserAction((UserItem(self.goal.composition[0], self.bye_act),), terminal=True)
        d = eff.domain
        if (eff.requested_slot is not None and d in self._constraints
                and eff.requested_slot in self._constraints[d]):
            slot = eff.requested_slot
            value = self._constraints[d][slot]
            self._note_informed(d, slot)
            return UserAction((UserItem(d, self.inform_act, slot, value),))
        return UserAction((self._next_initiative(),))


class Dialogue:
    """One episode; reset() has already happened on construction."""

    def __init__(self, ont: Ontology, db: Database, actions: ActionSet, goal: Goal,
                 max_turns: int = DEFAULT_MAX_TURNS, patience: int = DEFAULT_PATIENCE):
        self.ont = ont
        self.db = db
        self.actions = actions
        self.goal = goal
        self.max_turns = max_turns
        self.tracker = Tracker(ont)
        self.user = UserSimulator(ont, goal, patience)
        self.done = False
        self.success = False
        self.total_reward = 0.0
        opening = self.user.opening()
        self._apply_user(opening)

    def _apply_user(self, ua: UserAction) -> None:
        tr = self.tracker
        for it in ua.items:
            if it.act == self.user.inform_act and it.slot >= 0:
                tr.informs[it.domain][it.slot] = it.value
            elif it.act == self.user.request_act and it.slot >= 0:
                tr.requests[it.domain].add(it.slot)
        tr.user = ua

    def _apply_system(self, handle: int) -> _SystemEffect:
        try:
            spec = self.actions.specs[handle]
        except IndexError:
            raise EnvError(f"unknown action handle {handle}") from None
        tr = self.tracker
        ont = self.ont
        eff = _SystemEffect(domain=spec.domain)
        act = ont.acts[spec.act]
        if act.name == "bye":
            eff.bye = True
        elif act.name == "request":
            eff.requested_slot = spec.slots[0]
        elif act.name == "inform":
            d, slot = spec.domain, spec.slots[0]
            tr.queried.add(d)
            cons = tuple(tr.informs[d].items())
            eff.db_count = self.db.query(d, cons)
            if eff.db_count > 0:
                ent = self.db.first_match(d, cons)
                value = ent.get(slot)
                if value is not None:
                    eff.informed = (slot, value)
                    tr.requests[d].discard(slot)
                else:
                    eff.inform_failed = True
            else:
                eff.inform_failed = True
        elif act.name == "book":
            d = spec.domain
            tr.queried.add(d)
            eff.db_count = self.db.query(d, tuple(tr.informs[d].items()))
            if eff.db_count > 0 and tr.book[d] == BOOK_NONE:
                tr.book[d] = BOOK_ATTEMPTED
                eff.booked = True
        elif act.name == "offer-booked":
            d = spec.domain
            tr.queried.add(d)
            eff.db_count = self.db.query(d, tuple(tr.informs[d].items()))
            if tr.book[d] == BOOK_ATTEMPTED:
                tr.book[d] = BOOK_CONFIRMED
                eff.confirmed = True
        elif act.name == "no-offer":
            d = spec.domain
            tr.queried.add(d)
            eff.db_count = self.db.query(d, tuple(tr.informs[d].items()))
            eff.no_offer = True
        tr.history.append(handle)
        return eff

    def step(self, action: int) -> tuple[UserAction, float, bool, StateView]:
        if self.done:
            raise EnvError("episode already finished")
        eff = self._apply_system(action)
        if eff.bye:
            self.tracker.t += 1
            self.tracker.refresh_db(self.db)
            self.done = True
            self.success = self.user.all_complete(self.tracker)
            reward = -1.0 + (2.0 * self.max_turns if self.success else -1.0 * self.max_turns)
            self.total_reward += reward
            ua = UserAction((), terminal=True)
            self.tracker.user = ua
            return ua, reward, True, self.tracker.view()
        ua = self.user.respond(eff, self.tracker)
        self._apply_user(ua)
        self.tracker.t += 1
        self.tracker.refresh_db(self.db)
        reward = -1.0
        if ua.terminal:
            self.done = True
            self.success = self.user.all_complete(self.tracker)
            reward += 2.0 * self.max_turns if self.success else -1.0 * self.max_turns
        elif self.tracker.t >= self.max_turns:
            self.done = True
            self.success = False
            reward += -1.0 * self.max_turns
        self.total_reward += reward
        return ua, reward, self.done, self.tracker.view()

    def result(self) -> EpisodeResult:
        if not self.done:
            raise EnvError("episode still running")
        return EpisodeResult(self.success, self.tracker.t, self.total_reward)


class RulePolicy:
    """Hand-written system agent; also the warm-up demonstrator.

    Priorities: close a finished dialogue, confirm a pending booking,
    answer outstanding requests from the database (or report no match),
    book when the user asked and constraints are met, request missing
    essential slots, and otherwise probe an uninformed slot.
    """

    def __init__(self, ont: Ontology, db: Database, actions: ActionSet):
        self.ont = ont
        self.db = db
        self.actions = actions
        self.inform_act = ont.act_handle("inform")
        self.request_act = ont.act_handle("request")
        self.book_act = ont.act_handle("book")
        self.offer_act = ont.act_handle("offer-booked")
        self.nooffer_act = ont.act_handle("no-offer")
        self.bye_handle = actions.handle(None, ont.act_handle("bye"))

    def _focus(self, view: StateView) -> int:
        if view.user.items:
            return view.user.items[-1].domain
        return 0

    def __call__(self, view: StateView) -> int:
        if view.user.terminal:
            return self.bye_handle
        d = self._focus(view)
        dom = self.ont.domains[d]
        count = self.db.query(d, view.informs[d])
        if view.book[d] == BOOK_ATTEMPTED:
            return self.actions.handle(d, self.offer_act)
        if view.requests[d]:
            slot = view.requests[d][0]
            if count > 0:
                return self.actions.handle(d, self.inform_act, (slot,))
            return self.actions.handle(d, self.nooffer_act)
        informed = {s for s, _ in view.informs[d]}
        asked_book = any(it.act == self.book_act and it.domain == d for it in view.user.items)
        if asked_book and view.book[d] == BOOK_NONE:
            if count > 0 and all(s in informed for s in dom.essential):
                return self.actions.handle(d, self.book_act)
            if count == 0:
                return self.actions.handle(d, self.nooffer_act)
        for s in dom.essential:
            if s not in informed:
                return self.actions.handle(d, self.request_act, (s,))
        for s in dom.slots:
            if s not in informed:
                return self.actions.handle(d, self.request_act, (s,))
        return self.actions.handle(d, self.inform_act, (dom.slots[0],))


class RandomPolicy:
    def __init__(self, n_actions: int, rng: np.random.Generator):
        self.n = n_actions
        self.rng = rng

    def __call__(self, view: StateView) -> int:
        return int(self.rng.integers(self.n))


class Environment:
    """Ontology + database + action set, plus rollout helpers."""

    def __init__(self, ont: Ontology, db: Database, actions: ActionSet | None = None,
                 max_turns: int = DEFAULT_MAX_TURNS, patience: int = DEFAULT_PATIENCE,
                 no_offer_prob: float = 0.1):
        from .ontology import enumerate_actions
        self.ont = ont
        self.db = db
        self.actions = actions if actions is not None else enumerate_actions(ont)
        self.max_turns = max_turns
        self.patience = patience
        self.no_offer_prob = no_offer_prob

    @staticmethod
    def builtin(**kw) -> "Environment":
        from .ontology import builtin_ontology_path, load_ontology
        path = builtin_ontology_path()
        ont = load_ontology(path)
        db = Database.from_file(path, ont)
        return Environment(ont, db, **kw)

    def episode(self, goal: Goal) -> Dialogue:
        return Dialogue(self.ont, self.db, self.actions, goal,
                        max_turns=self.max_turns, patience=self.patience)

    def sample_task_goal(self, task: TaskSpec, rng: np.random.Generator) -> Goal:
        resolved = task.resolve(self.ont, rng)
        return sample_goal(self.ont, self.db, resolved, rng, self.no_offer_prob)

    def rule_policy(self) -> RulePolicy:
        return RulePolicy(self.ont, self.db, self.actions)

    def interact(self, task: TaskSpec, policy: Callable[[StateView], int],
                 rng: np.random.Generator, episodes: int = 1, epsilon: float = 0.0,
                 buffer=None, frame_cap: int | None = None) -> list[EpisodeResult]:
        """Roll episodes, optionally pushing tagged transitions to a buffer.

        frame_cap stops pushing (and collecting) once that many
        transitions have been recorded here; the capped episode is
        abandoned since nothing downstream needs its tail.
        """
        results = []
        frames = 0
        for _ in range(episodes):
            if frame_cap is not None and frames >= frame_cap:
                break
            goal = self.sample_task_goal(task, rng)
            dlg = self.episode(goal)
            view = dlg.tracker.view()
            truncated = False
            while not dlg.done:
                if epsilon > 0.0 and rng.random() < epsilon:
                    action = int(rng.integers(len(self.actions)))
                else:
                    action = policy(view)
                _, reward, done, nxt = dlg.step(action)
                if buffer is not None:
                    buffer.push(Transition(task.seed, view, action, reward, nxt, done))
                frames += 1
                view = nxt
                if frame_cap is not None and frames >= frame_cap and not done:
                    truncated = True
                    break
            if not truncated:
                results.append(dlg.result())
        return results
