"""Where does temporal attention look?

One word per clip carries the sentiment; everything else is filler. After
training, the attention weights should pile onto that word.
"""
# %%
import numpy as np

from gmelstm.data import SyntheticSpec, generate_synthetic, to_arrays
from gmelstm.evaluation import inspect_attention, render_attention
from gmelstm.model import ModelShape, SequenceModelParams
from gmelstm.training import TrainConfig, dataset_mae, train_supervised

clips = generate_synthetic(SyntheticSpec("keyword", n_clips=290, length=10), seed=0)
arr = to_arrays(clips, max_len=10)
train, val, test = arr.take(range(200)), arr.take(range(200, 240)), arr.take(range(240, 290))
print(clips[0].tokens, "planted at", clips[0].meta["planted"])

# %% train LSTM(A): 64 hidden units, Adam at 5e-4, early stopping on validation MAE
params = SequenceModelParams.init(ModelShape(d_in=13), seed=0)
result = train_supervised(params, train, val, TrainConfig(seed=0))
print("best epoch", result.best_epoch, "test MAE %.3f" % dataset_mae(result.params, test))

# %% the attended word is printed in bold markers
rows = inspect_attention(result.params, test)
print(render_attention(rows[:5]))
hits = np.mean([r.argmax == c.meta["planted"] for r, c in zip(rows, clips[240:])])
print(f"planted word is the attention argmax in {hits:.0%} of test clips")
