"""Shared loader for the demos: CIFAR-10 binaries from $ISS_CIFAR_DIR."""
import os
import sys

from iss.dataset import SplitSpec, load_cifar_dir, mark_poisoned, subset

CIFAR_DIR = os.environ.get("ISS_CIFAR_DIR", "cifar-10-batches-bin")


def full_splits():
    if not os.path.isdir(CIFAR_DIR):
        sys.exit(f"CIFAR-10 binaries not found in {CIFAR_DIR!r}; set ISS_CIFAR_DIR")
    return load_cifar_dir(CIFAR_DIR, True), load_cifar_dir(CIFAR_DIR, False)


def desk_data(train_count=5000, test_count=2000, seed=0):
    """Balanced train/test subsets; every training image is marked for poisoning."""
    train_full, test_full = full_splits()
    tr, _ = subset(train_full, SplitSpec(train_count, 0, True, seed))
    te, _ = subset(test_full, SplitSpec(test_count, 0, True, seed))
    return mark_poisoned(tr, fraction=1.0), te
