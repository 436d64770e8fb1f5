"""Train a small part-prototype classifier and look inside it.

Generates a five-class synthetic glyph dataset, runs the two training
stages (joint embedding+prototype fit with periodic projection, then a
convex refit of the linear readout), and shows what the model learned:
per-prototype relevance for a prediction and the input-space cut-out a
prototype's activation lives in.

Runs in well under a minute on a laptop CPU.
"""

from partproto import autodiff
from partproto.data import DatasetSpec, generate
from partproto.explain import attribution, extract_cutout, relevance, top_activated
from partproto.metrics import evaluate
from partproto.model import ModelConfig, PartProtoNet, load_checkpoint, save_checkpoint
from partproto.training import TrainConfig, train_stage1, train_stage2

autodiff.set_debug_checks(False)  # skip per-op finiteness asserts for speed

# -- data and model -----------------------------------------------------------

dataset = generate(DatasetSpec(seed=0, confounded_classes=(), confounder_colors=()))
print(f"dataset: {len(dataset.train)} train / {len(dataset.test)} test images, "
      f"{dataset.spec.v} classes")

model = PartProtoNet(ModelConfig(seed=0))
model, report = train_stage1(dataset, model, TrainConfig(epochs=20, seed=0))
model = train_stage2(dataset, model)  # prototypes frozen, readout refit

result = evaluate(model.predict(dataset.test), [e.label for e in dataset.test],
                  v=model.config.v)
print(f"after stage 1+2: test macro-F1 {result.macro_f1:.3f}")

# -- why did it predict that? -------------------------------------------------

example = dataset.test[0]
pred = model.predict([example])[0]
print(f"\nimage {example.id}: true class {example.label}, predicted {pred}")
print("prototype relevance (activation x readout weight), most supportive first:")
for j, score in relevance(model, example, pred)[:3]:
    print(f"  prototype {j} (class {model.class_of_prototype(j)}): {score:+.3f}")

# -- where does a prototype look? ----------------------------------------------

j = relevance(model, example, pred)[0][0]
best_image, act = top_activated(model, dataset.train, j, 1)[0]
amap = attribution(model, j, best_image)
cut = extract_cutout(model, amap, best_image)
print(f"\nprototype {j} activates strongest on {best_image.id} (act {act:.2f})")
print(f"cut-out boxes (top, left, bottom, right): {cut.boxes}")
print(f"stored as {len(cut.patches)} latent patch(es) whose receptive fields "
      f"intersect the boxes")

# -- checkpoints round-trip ------------------------------------------------------

path = save_checkpoint(model, "/tmp/quickstart.ckpt")
reloaded = load_checkpoint(path)
assert (reloaded.predict(dataset.test) == model.predict(dataset.test)).all()
print(f"\ncheckpoint saved and reloaded byte-faithfully: {path}")
