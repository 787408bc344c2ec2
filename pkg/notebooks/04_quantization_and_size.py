"""
Eight-bit embeddings, sixteen-bit weights, and what lands on disk
=================================================================

Run with ``python3 notebooks/04_quantization_and_size.py``.
"""

import os
import tempfile

import numpy as np

from convertlite.encoder import ModelConfig, small_config
from convertlite.model import ConveRTModel
from convertlite.numeric import to_half
from convertlite.quantization import EMBEDDING_8BIT, PARAM_16BIT, QuantRange, dequantize, quantize, update_quant_range
from convertlite.serialization import inspect_model, load_model, save_model
from convertlite.tokenizer import SubwordVocab

# %%
# The range grows with a margin of 10% of the observed span, but never less
# than 0.01 on each side.
r = update_quant_range(QuantRange(-0.1, 0.1), -0.5, 0.4)
print("grown range:", round(r.lo, 4), round(r.hi, 4))
codes, _ = quantize(np.array([-1.0, 0.0, 1.0]), QuantRange(-1, 1))
print("codes for -1, 0, 1 on [-1, 1]:", codes, "-> 0 decodes to",
      dequantize(codes[1:2], QuantRange(-1, 1))[0])

# %%
# Why the loss is scaled by 128: small gradients vanish in 16 bits.
g = np.float32(1e-8)
print("1e-8 in fp16:", to_half(np.array([g]))[0],
      "| scaled by 128:", to_half(np.array([g * 128]))[0])

# %%
# Quantize a fresh desk-scale model and compare encodings with the shadows.
vocab = SubwordVocab([chr(c) for c in range(97, 123)])
model = ConveRTModel(small_config(vocab.size), vocab, seed=0)
texts = ["hello there", "how are you", "see you tomorrow"]
hq = model.encode_texts(texts, quantized=True)
hf = model.encode_texts(texts, quantized=False)
print("cosine quantized vs shadow:", np.round((hq * hf).sum(axis=1), 5))

# %%
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "toy.cvrt")
    n = save_model(model, path)
    info = inspect_model(path)
    again = load_model(path, vocab)
    print(f"{n} bytes = {info.embedding_bytes} (8-bit embeddings) + "
          f"{info.network_bytes} (16-bit network) + {info.metadata_bytes} header")
    print("reload bit-identical:", np.array_equal(again.encode_texts(texts), hq))

# %%
# The full-size configuration, counted without training. The embedding table
# is the bulk of the parameters but only a third of the bytes.
full = ConveRTModel(ModelConfig(vocab_size=31_476), seed=0)
emb, net = full.count(EMBEDDING_8BIT), full.count(PARAM_16BIT)
print(f"embedding params {emb / 1e6:.1f}M -> {emb / 2**20:.1f} MB")
print(f"network params   {net / 1e6:.1f}M -> {2 * net / 2**20:.1f} MB")
