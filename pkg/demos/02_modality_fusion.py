"""Word-level fusion: when the words are ambiguous, the face decides.

In the ``complement`` task the flagged word ("it") says nothing about the
label; the visual vector at that same step does. Text alone can only read a
faint hint spread over the clip.
"""
# %%
from gmelstm.data import SyntheticSpec, generate_synthetic, to_arrays
from gmelstm.evaluation import evaluate
from gmelstm.model import ModelShape, SequenceModelParams
from gmelstm.training import TrainConfig, train_supervised

clips = generate_synthetic(SyntheticSpec("complement", n_clips=290), seed=1)
arr = to_arrays(clips, 10)
train, val, test = arr.take(range(200)), arr.take(range(200, 240)), arr.take(range(240, 290))

# %% same seed, same init, two modality subsets (excluded modalities are zeroed)
for mods in [("language",), ("language", "visual")]:
    params = SequenceModelParams.init(ModelShape(d_in=13), seed=1)
    res = train_supervised(params, train, val, TrainConfig(seed=1, modalities=mods))
    rep = evaluate(res.params, test, mods)
    print(f"{'+'.join(mods):16s} Acc {rep.acc:.2f}  F1 {rep.f1:.2f}  MAE {rep.mae:.3f}")
