#!/usr/bin/env python3
"""Quick demonstration of the clean/backdoor recombination table.

Trains a clean and a poisoned model on the synthetic desk dataset and prints
main-task / backdoor accuracy for all four feature-extractor x classifier
recombinations. The pattern to look for: backdoor accuracy follows the
classifier half, not the feature extractor.

Run:  python scripts/demo_surgery.py
"""

from fedplas import metrics, nn
from fedplas.attacks import AttackSpec, TriggerGeometry
from fedplas.cli import format_surgery_table
from fedplas.data import synth_generate

SEED = 123


def main():
    train = synth_generate(10, 200, 28, seed=SEED)
    test = synth_generate(10, 50, 28, seed=SEED + 1)
    attack = AttackSpec(
        kind="trigger",
        target_label=0,
        poison_fraction=0.4,
        trigger=TriggerGeometry(height=3, width=3),
        seed=SEED,
    )
    base = nn.TrainingConfig(learning_rate=0.1, momentum=0.0, batch_size=16, seed=SEED)
    branch = nn.TrainingConfig(learning_rate=0.05, momentum=0.0, batch_size=16, seed=SEED)
    table = metrics.surgery_experiment(
        train,
        test,
        attack,
        "lenet-s",
        base,
        cut_layer=2,
        epochs=3,
        warmup_epochs=2,
        branch_training=branch,
        seed=SEED,
    )
    print(format_surgery_table(table), end="")


if __name__ == "__main__":
    main()
