"""Bottom-up rule learning and rule-based link prediction.

Rules are generalised from sampled ground paths. A path is a head triple
plus a walk of body triples that starts at one end of the head. Three rule
shapes come out of a path:

* cyclic: ``h(X,Y) <= b1(X,A), b2(A,Y)``, when the walk returns to the
  other head entity;
* constant-ending: ``h(X,c) <= b1(X,A), b2(A,d)``, keeping the walk's last
  entity as a constant;
* dangling: ``h(X,c) <= b1(X,A), b2(A,B)``, with a constant only in the head.

Groundings follow object identity: every variable binds an entity distinct
from the other variables and from the rule's constants.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .evaluation import DEFAULT_KS, EvalReport, report_from_ranks
from .kg import SplitSet, TripleStore

log = logging.getLogger(__name__)

VARIABLES = "XYABCDEFGHIJKLMNOPQRSTUVWZ"
_INTERMEDIATE = VARIABLES[2:]


def is_var(term) -> bool:
    return isinstance(term, str)


@dataclass(frozen=True)
class Rule:
    """``head <= body``; atoms are ``(relation, term, term)`` where a term is a
    variable name (str) or an entity id (int)."""

    head: tuple
    body: tuple
    support: int = 0
    body_count: int = 0

    @property
    def confidence(self) -> float:
        return self.support / self.body_count if self.body_count else 0.0

    @property
    def shape(self) -> tuple:
        return (self.head, self.body)

    @property
    def head_vars(self) -> tuple:
        return tuple(t for t in self.head[1:] if is_var(t))

    @property
    def constants(self) -> set:
        return {t for a in (self.head,) + self.body for t in a[1:] if not is_var(t)}

    @property
    def kind(self) -> str:
        if len(self.head_vars) == 2:
            return "cyclic"
        last = self.body[-1]
        return "dangling" if all(is_var(t) for t in last[1:]) else "constant"

    def with_counts(self, support: int, body_count: int) -> "Rule":
        return Rule(self.head, self.body, support, body_count)


@dataclass
class GroundPath:
    head: tuple
    body: list
    start: int  # 0: walk leaves from the head subject, 2: from the head object

    def __len__(self) -> int:
        return len(self.body)


def sample_ground_path(store: TripleStore, max_len: int, rng) -> GroundPath:
    """Uniform head triple, then up to ``max_len`` uniformly chosen incident
    triples walked from a random end of the head. The walk stops early when
    the current entity has no unused incident triple."""
    if len(store) == 0:
        raise ValueError("cannot sample a path from an empty store")
    t = store.triples
    head = tuple(int(x) for x in t[rng.integers(len(t))])
    start = 0 if rng.random() < 0.5 else 2
    length = int(rng.integers(1, max_len + 1))
    node = head[start]
    used = {head}
    body = []
    inc = _incidence(store)
    for _ in range(length):
        options = [tr for tr in inc.get(node, ()) if tr not in used]
        if not options:
            break
        tr = options[rng.integers(len(options))]
        used.add(tr)
        body.append(tr)
        node = tr[2] if tr[0] == node else tr[0]
    return GroundPath(head, body, start)


def _incidence(store: TripleStore) -> dict:
    cached = getattr(store, "_rule_incidence", None)
    if cached is None:
        cached = {}
        for tr in map(tuple, store.triples.tolist()):
            cached.setdefault(tr[0], []).append(tr)
            if tr[2] != tr[0]:
                cached.setdefault(tr[2], []).append(tr)
        store._rule_incidence = cached
    return cached


def _walk_nodes(path: GroundPath) -> list:
    nodes = [path.head[path.start]]
    for tr in path.body:
        nodes.append(tr[2] if tr[0] == nodes[-1] else tr[0])
    return nodes


def generalize(path: GroundPath) -> list[Rule]:
    """Candidate rules (unscored) for a ground path; see the module notes.

    Paths revisiting an entity, other than closing onto the opposite head
    entity, give no rules, as their groundings would break object identity.
    """
    if not path.body:
        return []
    nodes = _walk_nodes(path)
    start_var = "X" if path.start == 0 else "Y"
    other_var = "Y" if path.start == 0 else "X"
    other = path.head[2 - path.start]
    inner = nodes[1:-1]
    if len(set(nodes[:-1])) != len(nodes) - 1 or other in inner or nodes[0] == other:
        return []
    names = {nodes[0]: start_var}
    for i, e in enumerate(inner):
        names[e] = _INTERMEDIATE[i]

    def atoms(last_term):
        table = dict(names)
        out = []
        for tr in path.body:
            s = last_term if tr[0] == nodes[-1] else table[tr[0]]
            o = last_term if tr[2] == nodes[-1] else table[tr[2]]
            out.append((tr[1], s, o))
        return tuple(out)

    def head(other_term):
        h = [path.head[1], None, None]
        h[1 + (path.start // 2)] = start_var
        h[2 - (path.start // 2)] = other_term
        return tuple(h)

    last = nodes[-1]
    rules = []
    if last == other:
        rules.append(Rule(head(other_var), atoms(other_var)))
    elif last not in names:
        rules.append(Rule(head(other), atoms(int(last))))
        rules.append(Rule(head(other), atoms(_INTERMEDIATE[len(inner)])))
    return list(dict.fromkeys(rules))


# -- grounding ----------------------------------------------------------------

class _Timeout(Exception):
    pass


def _expand(atom, bindings: dict, used: frozenset, store: TripleStore):
    """Bindings extending ``bindings`` that satisfy one atom."""
    p, a, b = atom
    va = bindings.get(a, a) if is_var(a) else a
    vb = bindings.get(b, b) if is_var(b) else b
    a_free, b_free = is_var(va), is_var(vb)
    if not a_free and not b_free:
        if (va, p, vb) in store:
            yield bindings, used
        return
    if a_free and b_free:
        pairs = store.with_relation(p)
        if a == b:
            pairs = pairs[pairs[:, 0] == pairs[:, 2]]
        for s, _, o in pairs.tolist():
            if s in used or o in used or (s == o and a != b):
                continue
            nb = dict(bindings)
            nb[a] = s
            nb[b] = o
            yield nb, used | {s, o}
        return
    if a_free:
        cands, var = store.subjects(p, vb), a
    else:
        cands, var = store.objects(va, p), b
    for e in sorted(cands):
        if e not in used:
            nb = dict(bindings)
            nb[var] = e
            yield nb, used | {e}


def _ground(body, bindings: dict, used, store: TripleStore, deadline=None):
    """Yield every extension of ``bindings`` satisfying ``body``; ``used`` holds
    the entities already taken (bound variables and rule constants)."""
    if not body:
        yield bindings
        return
    if deadline is not None and time.monotonic() > deadline:
        raise _Timeout
    for nb, nu in _expand(body[0], bindings, frozenset(used), store):
        yield from _ground(body[1:], nb, nu, store, deadline)


def _head_groundings(rule: Rule, store: TripleStore, deadline=None) -> set:
    """Distinct head-variable tuples with at least one body grounding. Once
    the head variables are bound only existence of a completion matters."""
    hv = rule.head_vars
    found: set = set()

    def search(body, bindings, used):
        if all(v in bindings for v in hv):
            key = tuple(bindings[v] for v in hv)
            if key not in found and next(_ground(body, bindings, used, store, deadline), None) is not None:
                found.add(key)
            return
        if deadline is not None and time.monotonic() > deadline:
            raise _Timeout
        for nb, nu in _expand(body[0], bindings, used, store):
            search(body[1:], nb, nu)

    search(rule.body, {}, frozenset(rule.constants))
    return found


def score_rule(rule: Rule, train: TripleStore, deadline: float | None = None):
    """``(support, body_count, confidence)``: distinct head-variable groundings
    satisfying the body, how many of their head predictions are in
    ``train``, and the ratio. ``body_count == 0`` gives confidence ``None``."""
    groundings = _head_groundings(rule, train, deadline)
    p = rule.head[0]
    hv = rule.head_vars
    support = 0
    for g in groundings:
        b = dict(zip(hv, g))
        s = b.get(rule.head[1], rule.head[1])
        o = b.get(rule.head[2], rule.head[2])
        support += (s, p, o) in train
    n = len(groundings)
    return support, n, (support / n if n else None)


# -- rule base ----------------------------------------------------------------

@dataclass
class RuleBase:
    rules: dict = field(default_factory=dict)  # head relation -> list[Rule]
    metadata: dict = field(default_factory=dict)

    def add(self, rule: Rule) -> None:
        self.rules.setdefault(rule.head[0], []).append(rule)

    def __len__(self) -> int:
        return sum(len(v) for v in self.rules.values())

    def __iter__(self):
        for p in sorted(self.rules):
            yield from self.rules[p]

    def for_relation(self, p: int) -> list[Rule]:
        return self.rules.get(p, [])

    def find(self, head, body) -> Rule | None:
        for r in self.for_relation(head[0]):
            if r.head == head and r.body == tuple(body):
                return r
        return None


def _learn_worker(args):
    train, budget, max_len, threshold, min_conf, seed = args
    return _learn_serial(train, budget, max_len, threshold, min_conf, seed)


def _learn_serial(train, time_budget_s, max_len, threshold, min_confidence, seed):
    rng = np.random.default_rng(seed)
    deadline = time.monotonic() + time_budget_s
    seen: set = set()
    kept: list[Rule] = []
    n_paths = 0
    while time.monotonic() < deadline:
        path = sample_ground_path(train, max_len, rng)
        n_paths += 1
        for cand in generalize(path):
            if cand.shape in seen:
                continue
            seen.add(cand.shape)
            try:
                support, n, conf = score_rule(cand, train, deadline)
            except _Timeout:
                break
            if n and support >= threshold and support > 0 and conf >= min_confidence:
                kept.append(cand.with_counts(support, n))
    return kept, n_paths, len(seen)


def learn(train: TripleStore, time_budget_s: float, max_len: int = 2, threshold: float = 1,
          workers: int = 1, min_confidence: float = 0.0, seed: int = 0) -> RuleBase:
    """Sample, generalise and score rules until the wall-clock budget ends.

    ``threshold`` is a minimum support count; ``min_confidence`` optionally
    filters on confidence too. With ``workers > 1`` independent samplers run
    in separate processes and their rules are merged, so the result depends
    on scheduling.
    """
    if time_budget_s <= 0:
        raise ValueError("time budget must be positive")
    if not 1 <= max_len <= 4:
        raise ValueError("max_len must lie in [1, 4]")
    t0 = time.monotonic()
    if workers <= 1:
        results = [_learn_serial(train, time_budget_s, max_len, threshold, min_confidence, seed)]
    else:
        jobs = [(train, time_budget_s, max_len, threshold, min_confidence, [seed, i])
                for i in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_learn_worker, jobs))
    base = RuleBase(metadata={
        "time_budget_s": time_budget_s, "threshold": threshold, "threshold_semantics": "min support",
        "min_confidence": min_confidence, "max_length": max_len, "workers": workers, "seed": seed,
        "reproducible": workers <= 1, "paths_sampled": sum(r[1] for r in results),
        "candidates_scored": sum(r[2] for r in results),
        "elapsed_s": round(time.monotonic() - t0, 3)})
    seen = set()
    for kept, _, _ in results:
        for r in kept:
            if r.shape not in seen:
                seen.add(r.shape)
                base.add(r)
    return base


# -- prediction -----------------------------------------------------------------

def _fire(rule: Rule, query, train: TripleStore) -> set:
    """Entities the rule predicts for the open slot of ``query``."""
    s, _, o = query
    pos = 1 if o is None else 2  # head slot holding the known entity
    known = s if o is None else o
    open_pos = 3 - pos
    kt, ot = rule.head[pos], rule.head[open_pos]
    consts = rule.constants
    bindings = {}
    used = set(consts)
    if is_var(kt):
        if known in used:
            return set()
        bindings[kt] = known
        used = used | {known}
    elif kt != known:
        return set()
    if not is_var(ot):
        for _ in _ground(rule.body, bindings, used, train):
            return {ot}
        return set()
    return {g[ot] for g in _ground(rule.body, bindings, used, train)}


def predict(rulebase: RuleBase, query, train: TripleStore,
            aggregation: str = "max") -> list[tuple[int, tuple]]:
    """Candidates for ``(s, p, None)`` or ``(None, p, o)``, best first.

    With ``aggregation="max"`` each candidate carries the descending tuple of
    confidences of the rules that fire for it; tuples compare
    lexicographically, so the maximum decides and later entries break ties.
    ``"noisy_or"`` scores ``1 - prod(1 - c)`` instead (a 1-tuple).
    """
    s, p, o = query
    if (s is None) == (o is None):
        raise ValueError("query must leave exactly one of subject/object open")
    fired: dict[int, list[float]] = {}
    for rule in rulebase.for_relation(p):
        for e in _fire(rule, query, train):
            fired.setdefault(e, []).append(rule.confidence)
    out = []
    for e, confs in fired.items():
        if aggregation == "max":
            key = tuple(sorted(confs, reverse=True))
        elif aggregation == "noisy_or":
            key = (1.0 - float(np.prod([1.0 - c for c in confs])),)
        else:
            raise ValueError(f"unknown aggregation {aggregation!r}")
        out.append((e, key))
    out.sort(key=lambda x: x[0])
    out.sort(key=lambda x: x[1], reverse=True)
    return out


def _rank(candidates, answer, drop: set) -> float:
    scores = {e: key for e, key in candidates if e == answer or e not in drop}
    if answer not in scores:
        return np.inf
    t = scores.pop(answer)
    greater = sum(1 for k in scores.values() if k > t)
    tied = sum(1 for k in scores.values() if k == t)
    return 1.0 + greater + tied / 2.0


def evaluate_rules(rulebase: RuleBase, test: TripleStore, splits: SplitSet,
                   ks=DEFAULT_KS, aggregation: str = "max") -> EvalReport:
    """Filtered MRR/HITS of rule predictions; queries whose answer is never
    generated count 0. ``coverage`` is the share of direction-queries whose
    answer was generated."""
    known = splits.known()
    train = splits.train
    t = test.triples
    head = np.empty(len(t))
    tail = np.empty(len(t))
    for i, (s, p, o) in enumerate(t.tolist()):
        tail[i] = _rank(predict(rulebase, (s, p, None), train, aggregation), o,
                        known.objects(s, p))
        head[i] = _rank(predict(rulebase, (None, p, o), train, aggregation), s,
                        known.subjects(p, o))
    both = np.concatenate([head, tail])
    coverage = float(np.isfinite(both).mean()) if len(both) else 0.0
    return report_from_ranks(t, head, tail, test.relations, ks, coverage=coverage)


# -- rules file -------------------------------------------------------------------

def _term_text(term, entities) -> str:
    if is_var(term):
        return term
    name = entities.name(term)
    if name in VARIABLES or any(c in name for c in "(),\t\n"):
        raise FormatError(f"entity name {name!r} cannot appear in a rules file")
    return name


def format_rule(rule: Rule, entities, relations) -> str:
    def atom(a):
        p, x, y = a
        rel = relations.name(p)
        if any(c in rel for c in "(),\t\n") or " <= " in rel:
            raise FormatError(f"relation name {rel!r} cannot appear in a rules file")
        return f"{rel}({_term_text(x, entities)},{_term_text(y, entities)})"

    body = ", ".join(atom(a) for a in rule.body)
    return f"{rule.support}\t{rule.body_count}\t{rule.confidence:.6f}\t{atom(rule.head)} <= {body}"


def _parse_atom(text: str, entities, relations, lineno: int):
    text = text.strip()
    if not text.endswith(")") or "(" not in text:
        raise FormatError(f"line {lineno}: malformed atom {text!r}")
    rel, args = text[:-1].split("(", 1)
    parts = args.split(",")
    if len(parts) != 2 or rel not in relations:
        raise FormatError(f"line {lineno}: malformed atom {text!r}")
    terms = []
    for t in parts:
        t = t.strip()
        if t in VARIABLES:
            terms.append(t)
        elif t in entities:
            terms.append(entities.id(t))
        else:
            raise FormatError(f"line {lineno}: unknown entity {t!r}")
    return (relations.id(rel), terms[0], terms[1])


def parse_rule(line: str, entities, relations, lineno: int = 1) -> Rule:
    cols = line.rstrip("\n").split("\t")
    if len(cols) != 4 or " <= " not in cols[3]:
        raise FormatError(f"line {lineno}: expected support, body_count, confidence, rule")
    try:
        support, n = int(cols[0]), int(cols[1])
    except ValueError:
        raise FormatError(f"line {lineno}: non-integer counts") from None
    head_text, body_text = cols[3].split(" <= ", 1)
    head = _parse_atom(head_text, entities, relations, lineno)
    atoms = [a + ")" if not a.endswith(")") else a for a in body_text.split("), ")]
    body = tuple(_parse_atom(a, entities, relations, lineno) for a in atoms)
    return Rule(head, body, support, n)


def write_rules(rulebase: RuleBase, path, entities, relations) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rule in rulebase:
            fh.write(format_rule(rule, entities, relations) + "\n")


def read_rules(path, entities, relations) -> RuleBase:
    base = RuleBase()
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            base.add(parse_rule(line, entities, relations, i))
    return base
