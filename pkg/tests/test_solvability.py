"""Every synthetic task is learnable when the whole toy model is trained."""

import numpy as np
import pytest

from moelora import autodiff as ad
from moelora import datagen
from moelora.model import ModelConfig
from moelora.training import TrainConfig, collate, pretrain_base, train


@pytest.mark.slow
def test_full_fine_tune_reaches_90_percent_token_accuracy():
    ds = datagen.generate(42)
    model = pretrain_base(ModelConfig(), 42, 600)
    for t in model.named_tensors().values():
        t.requires_grad = True
    cfg = TrainConfig(max_steps=2000, learning_rate=1e-3, batch_size=64, eval_interval=0, dropout=0.0)
    train(model, ds, cfg)
    accuracy = {}
    with ad.no_grad():
        for task, samples in ds.split("test").by_task().items():
            tokens, targets, mask = collate(samples, cfg.max_input_len, cfg.max_output_len)
            pred = model.forward(tokens).data.argmax(-1)
            accuracy[task] = float(np.mean((pred == targets)[mask]))
    print(accuracy)
    assert min(accuracy.values()) >= 0.90, accuracy
