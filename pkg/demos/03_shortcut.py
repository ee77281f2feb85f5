"""Does the model learn the poison instead of the images?

Trains the desk MLP on LSP-poisoned images and tests it three ways: on
clean test images, on test images carrying the same class-wise patches, and
on those poisoned test images after grayscale.  A model that learned the
shortcut scores high on the second set, low on the first, and loses the
shortcut on the third.  The last line retrains with grayscale applied to the
training set, which is the countermeasure itself.

    python demos/03_shortcut.py        # about two minutes on one core
"""
import numpy as np

from iss import poisongen as pg
from iss.dataset import mark_poisoned
from iss.imageops import GRAY
from iss.tinynet import MLP, TrainConfig, evaluate, init_model, train

from _data import desk_data

train_set, test_set = desk_data()
pert = pg.lsp(train_set, seed=0)
poisoned = pg.apply_perturbation(train_set, pert)
test_poisoned = pg.apply_perturbation(mark_poisoned(test_set, fraction=1.0), pert.transfer(test_set))

model = train(init_model(MLP, 0, np.float32), poisoned, TrainConfig())
print(f"clean test            {evaluate(model, test_set):.3f}")
print(f"poisoned test         {evaluate(model, test_poisoned):.3f}")
print(f"gray(poisoned test)   {evaluate(model, test_poisoned, GRAY):.3f}")

squeezed = train(init_model(MLP, 0, np.float32), poisoned, TrainConfig(preprocess=GRAY))
print(f"trained on gray, clean test {evaluate(squeezed, test_set):.3f}")
