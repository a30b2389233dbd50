"""Gate controllers trained by REINFORCE on a noisy visual channel.

Some visual steps are replaced by large-variance noise. Each controller is a
small sigmoid network that decides, step by step, whether its modality gets
through. It never sees a gradient of the task loss: it only learns which
sampled gate patterns led to lower validation MAE.

Expect modest movement. With thousands of gate decisions per sample and only
five samples per update, the reward barely tells the decisions apart.
"""
# %%
import numpy as np

from gmelstm.data import SyntheticSpec, generate_synthetic, to_arrays
from gmelstm.evaluation import gate_summary
from gmelstm.gme import GateController, apply_gates, inference_gates
from gmelstm.model import ModelShape, SequenceModelParams
from gmelstm.training import ReinforceConfig, TrainConfig, dataset_mae, train_gme, train_supervised

clips = generate_synthetic(SyntheticSpec("noise", n_clips=250), seed=0)
arr = to_arrays(clips, 10)
train, val, test = arr.take(range(160)), arr.take(range(160, 200)), arr.take(range(200, 250))
noisy = np.zeros(test.mask.shape, bool)
for i, c in enumerate(clips[200:]):
    noisy[i, c.meta["noise"]] = True

template = SequenceModelParams.init(ModelShape(d_in=13, hidden=16), seed=0)
inner = TrainConfig(lr=5e-3, max_epochs=60, patience=15, seed=0)
baseline = train_supervised(template, train, val, inner)
print("LSTM(A) test MAE %.3f" % dataset_mae(baseline.params, test))

# %% a few controller epochs (the full schedule is 20 epochs x 5 samples)
ctrls = {"acoustic": GateController.init("acoustic", 3, seed=1),
         "visual": GateController.init("visual", 4, seed=2)}
res = train_gme(ctrls, template, train, val, inner,
                ReinforceConfig(epoch_num=4, n_samples=5, lr=1e-2, advantage_mode="centered"),
                on_sample=lambda r: print("epoch {epoch} sample {k}: val MAE {loss:.3f}, "
                                          "baseline {baseline:.3f}".format(**r)))

# %% how do pass probabilities differ on noisy vs clean steps?
traces = inference_gates(res.controllers, test)
print(gate_summary(traces, noisy)["visual"])
print("GME-LSTM(A) test MAE %.3f" % dataset_mae(res.params, apply_gates(test, traces)))
