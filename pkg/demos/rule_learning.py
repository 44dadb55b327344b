"""Learn rules bottom-up and use them for link prediction.

A graph is built with a known rule ``head(X,Y) <= body(X,Y)`` that holds for
70% of body pairs. The learner samples paths, generalizes them into rules,
and scores every candidate by counting groundings. The planted rule comes
back with its confidence.
"""

import numpy as np

from kglink.kg import TripleStore, Vocabulary, make_splits
from kglink.rules import Rule, evaluate_rules, format_rule, learn, predict, score_rule
from kglink.synthetic import planted_rule_kg

kg = planted_rule_kg(confidence=0.7, n_groundings=12000, n_entities=4000, seed=0)
base = learn(kg, time_budget_s=5.0, max_len=2, threshold=10, seed=0)
print(f"{len(base)} rules from {base.metadata['paths_sampled']} sampled paths")

planted = base.find((1, "X", "Y"), ((0, "X", "Y"),))
print("planted rule:", format_rule(planted, kg.entities, kg.relations))

top = sorted(base, key=lambda r: (-r.confidence, -r.support))[:5]
for rule in top:
    print(f"  {rule.confidence:.3f}  {format_rule(rule, kg.entities, kg.relations)}")

# confidence is support over the number of body groundings
ent = Vocabulary(f"d{i}" for i in range(240))
ent.add("disease_a")
ent.add("disease_b")
triples = [[i, 0, 240] for i in range(238)] + [[i, 0, 241] for i in range(150)]
store = TripleStore(np.array(triples), ent, Vocabulary(["treats"]))
support, n, conf = score_rule(Rule((0, "X", 241), ((0, "X", 240),)), store)
print(f"treats(X, disease_b) <= treats(X, disease_a): {support}/{n} = {conf:.0%}")

# rule-based link prediction on a held-out split
splits = make_splits(kg, seed=1)
rules = learn(splits.train, time_budget_s=5.0, max_len=2, threshold=10, seed=0)
head = kg.relations.id("head")
s, p, o = next(t for t in splits.test.triples.tolist()
               if t[1] == head and predict(rules, (t[0], head, None), splits.train))
print("query", kg.entities.name(s), "head ?  (answer", kg.entities.name(o) + ")")
for e, key in predict(rules, (s, p, None), splits.train)[:3]:
    print(f"  {kg.entities.name(e)}  {key[0]:.3f}")
report = evaluate_rules(rules, splits.test, splits)
print(f"test MRR {report.mrr:.3f}, coverage {report.coverage:.3f}")
