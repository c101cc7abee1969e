"""Pretrain the toy navigator, then run it online on a shifted stream.

Takes about 20 seconds, mostly pretraining.
"""
from fstta import model, navsim
from fstta.engine import AdaptSession, Strategy
from fstta.fast import FastConfig
from fstta.slow import SlowConfig

params = model.pretrain(navsim.teacher_sampler(), model.TrainConfig(), seed=0)
print("held-out step accuracy", round(params.meta["heldout_accuracy"], 3))

shift = navsim.ShiftSpec.unseen(77)
stream = navsim.generate_stream(77, shift, 150)
fast = FastConfig(base_lr=0.18)  # toy-calibrated rates, see README
slow = SlowConfig(lr=1.0)

for strategy in (Strategy.no_adapt(), Strategy.tent_interval(1, fast),
                 Strategy.fast_only(fast), Strategy.fast_slow(fast, slow)):
    session = AdaptSession(params, strategy)
    m = navsim.evaluate(navsim.run_stream(session, stream))
    d = session.diagnostics()
    print(f"{strategy.name:<12} SR {m.SR:5.1f}  SPL {m.SPL:5.1f}  fast {d['fast_updates']:4d}  slow {d['slow_updates']:3d}")
