"""Train the same network three ways on the canonical non-IID task:
centralized, federated, and a hybrid that mixes the two each round.

    python3 walkthroughs/modes.py
"""
import numpy as np

from omniisr import canonical
from omniisr.data import train_test_split
from omniisr.fedsim import partition, train_fl
from omniisr.hybrid import HybridSchedule, summarize_alignment, train_hybrid
from omniisr.isr import ISRObjective
from omniisr.trainer import OptimizerConfig, train_cl

SEED = 0
ROUNDS = 30

data, _, fed = canonical.task(SEED, local_epochs=2, rounds=ROUNDS)
train, test = train_test_split(data, 0.25, seed=SEED)
obj = ISRObjective(canonical.spec(), canonical.isr_plan())
opt = OptimizerConfig(base_eta=0.05, T=ROUNDS)


def report(name, params):
    print(f"{name:>11}: train acc {obj.accuracy(params, train.x, train.y):.3f}"
          f"  test acc {obj.accuracy(params, test.x, test.y):.3f}"
          f"  train loss {obj.evaluate(params, train.x, train.y).total:.4f}")


# centralized: every step sees the whole training set (30 steps, one per round
# of the other modes, so the CL run does far fewer local updates)
params, trace = train_cl(obj, train, opt, seed=SEED)
report("cl", params)

# federated: the training set is split across clients by a Dirichlet draw
shards = partition(train, fed, seed=SEED)
print("client sizes:", [len(s) for s in shards])
params, diags = train_fl(obj, shards, fed, opt, seed=SEED)
report("fl", params)
print(f"             mean H_t {np.mean([d.H for d in diags]):.4f}  mean drift {np.mean([d.drift for d in diags]):.5f}")

# hybrid: 30% of the training set stays on the cloud, the rest is federated
perm = np.random.default_rng(SEED).permutation(len(train))
k = int(0.3 * len(train))
cloud, device = train.subset(np.sort(perm[:k])), train.subset(np.sort(perm[k:]))
device_shards = partition(device, fed, seed=SEED)
for sched in (HybridSchedule("fixed", 0.5), HybridSchedule("alternating"),
              HybridSchedule("adaptive", 0.2, beta=0.2, alpha_min=0.1)):
    params, htrace = train_hybrid(obj, cloud, device_shards, fed, sched, opt, seed=SEED)
    report(sched.regime, params)
    if htrace.alignment:
        s = summarize_alignment(htrace.alignment)
        print("             alignment", {k: round(v, 4) for k, v in s.items()}, f" final alpha {htrace.alphas[-1]:.3f}")
