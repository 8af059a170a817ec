"""
Split multilayer perceptron
===========================

A network with one independent branch per input block, trained with
minibatch Adagrad, plus a look at its hidden activations.
"""

import numpy as np

from hybridinv.neural import MlpSpec, TrainConfig, dump_activations, parameter_count, predict, train

# Two input blocks of 10 features; targets depend on each block separately
rng = np.random.default_rng(0)
X = rng.uniform(size=(2000, 20))
T = np.column_stack([X[:, :10].mean(axis=1), X[:, 10:].max(axis=1)])

spec = MlpSpec.split([10, 10], [16, 8], [16], 2, dropout_rate=0.0, seed=1)
plain = MlpSpec.plain((20, 32, 16, 16, 2))
print("parameters, split vs plain:", parameter_count(spec), parameter_count(plain))

model, losses = train(spec, (X, T), TrainConfig(learning_rate=0.05, minibatch_size=50, epochs=30, seed=2))
print("loss epoch 1 / 30:", losses[0], losses[-1])
print("prediction:", predict(model, X[:2]), "target:", T[:2])

# Activations of branch 1 ignore whatever is fed to branch 2
rows = dump_activations(model, X[:3], ["branch1.fc1", "joint.fc1"])
for sample, tag, values in rows:
    print(sample, tag, np.round(values[:4], 3))
