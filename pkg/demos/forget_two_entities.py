"""Forget everything the model learned about two entities, then compare with gradient ascent.

Trains a small base model on a reduced synthetic sentiment corpus, learns a
30-token forgetting prompt for reviews that mention "aldren" or "brisco",
and prints the four-way accuracy table for the base model, the prompted
model and a gradient-ascent fine-tune. Takes about a minute on one core.

    python demos/forget_two_entities.py
"""
from spul.baselines import BaselineConfig, run_ga
from spul.data import make_corpus, partition_by_entities
from spul.evaluation import evaluate_matrix
from spul.lm import train_base
from spul.prompt_unlearn import UnlearnConfig, count_trainable, unlearn_train

train, test = make_corpus(n_train=1500, n_test=400, seed=0)
split = partition_by_entities(train, test, ["aldren", "brisco"])
print({name: len(rows) for name, rows in split.subsets().items()})

base, log = train_base(train, epochs=6, lr=2e-3, seed=0)
base.freeze()
print("base loss per epoch:", ", ".join(f"{x:.3f}" for x in log.epoch_loss))

before = evaluate_matrix(base, split, meta={"method": "base"})
print(before.table())

bank, ulog = unlearn_train(base, split, UnlearnConfig(p=30, lr=3e-3, epochs=10, alpha=1.0, beta=0.5, seed=0))
after = evaluate_matrix(base, split, bank.tensor(), meta={"method": "prompt"})
print(after.table())
print(f"prompt holds {count_trainable(bank)} values; the model has {base.n_params()}")

# the base model is untouched; fine-tuning works on a copy
ga_model, _ = run_ga(base, split.train_forget, BaselineConfig("ga", lr=3e-4, seed=0))
print(evaluate_matrix(ga_model, split, meta={"method": "ga"}).table())
