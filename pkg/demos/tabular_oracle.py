"""Train a DDQN teacher on a small fixture MDP and compare it with value iteration.

    python demos/tabular_oracle.py [fixture]

Prints the learned and optimal Q tables side by side for every task.
"""
import sys

import numpy as np

from distillrec.envsim import TabularTaskEnv, make_fixture_mdp
from distillrec.evalkit import optimal_actions, value_iteration
from distillrec.representation import StateInput
from distillrec.teacher import TeacherConfig, TeacherNet, q_scores, tabular_dims, train_teacher

name = sys.argv[1] if len(sys.argv) > 1 else "random-6x4"
mdp = make_fixture_mdp(name)
eye = StateInput(None, np.eye(mdp.n_states), np.zeros((mdp.n_states, 0)))
# uniform exploration keeps every (state, action) pair in the replay buffer
cfg = TeacherConfig(epochs=10, steps_per_epoch=2000, epsilon=1.0, keep_states=False)

np.set_printoptions(precision=3, suppress=True)
for task in range(mdp.n_tasks):
    net = TeacherNet.init(tabular_dims(mdp.n_states, mdp.n_actions), np.random.default_rng(task))
    train_teacher(TabularTaskEnv(mdp, task, np.random.default_rng(100 + task)), cfg, net,
                  np.random.default_rng(200 + task))
    Q = q_scores(net, eye, np.eye(mdp.n_actions))
    Qstar = value_iteration(mdp, task)
    best = optimal_actions(Qstar)
    match = np.mean([int(np.argmax(Q[s])) in best[s] for s in range(mdp.n_states)])
    print(f"{name}, task {task}: policy match {match:.0%}, max |Q - Q*| = {np.abs(Q - Qstar).max():.4f}")
    print("learned\n", Q)
    print("optimal\n", Qstar)
