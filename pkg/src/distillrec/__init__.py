"""Multi-task recommendation by distilling per-task DDQN teachers into one student network.

Modules:

``nnkit``          dense layers, GRU cell, temperature softmax, Adam, gradient checks
``representation`` item and user-state vectors, stacked-GRU short-term encoder
``envsim``         simulated users, tabular MDP fixtures, interaction logs
``teacher``        per-task double-DQN teachers
``distill``        distillation data, KL loss and the multi-branch student
``evalkit``        ranking metrics, value iteration, size and latency accounting
``pipeline``       stage functions used by the command line
"""

__version__ = "0.1.0"
