"""Train the three-shape toy classifier and probe it at half resolution.

Run with ``python3 demos/train_toy.py``; takes about a minute on one core.
"""

from cpt import toy
from cpt.train import point_count_table, train


def main():
    train_set, test_set = toy.datasets(seed=0)
    print(f"{len(train_set)} training and {len(test_set)} test clouds of {train_set.num_points} points")

    def progress(record, _params):
        if "train_acc" in record:
            print(f"epoch {record['epoch']:3d}  loss {record['train_loss']:.3f}  "
                  f"train {record['train_acc']:.3f}  test {record['test_acc']:.3f}")

    params, report = train(toy.MODEL, toy.TRAIN, train_set, test_set, on_epoch=progress)
    print()
    for row in point_count_table(test_set, toy.MODEL, params, [96, 64, 32], seed=0):
        print(f"{row['points']:4d} points  accuracy {row['overall_acc']:.3f}")


if __name__ == "__main__":
    main()
