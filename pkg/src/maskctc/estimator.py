"""scikit-learn style wrapper around training and decoding."""
from dataclasses import fields

from sklearn.base import BaseEstimator

from .decoding import DecodeConfig, recognize
from .metrics import error_rate
from .model import Vocabulary
from .synthdata import Utterance
from .training import TrainConfig, Trainer
from .validation import check_features, check_positive_int, check_token_sequences

_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]


class MaskCTCRecognizer(BaseEstimator):
    """Joint CTC / masked-token recognizer.

    ``X`` is a list of ``(frames, dim)`` feature matrices and ``y`` a list of
    integer token sequences. ``predict`` decodes with ``strategy``; ``score``
    returns ``1 - token error rate``.

    After ``fit``: ``model_`` (averaged network), ``vocab_``, ``history_``,
    ``n_features_in_``.
    """

    def __init__(
        self,
        vocab_size=None,
        architecture="conformer",
        enc_layers=2,
        dec_layers=2,
        attn_dim=64,
        num_heads=4,
        ffn_dim=128,
        conv_kernel=7,
        downsample=2,
        dropout=0.0,
        alpha=0.3,
        beta=1.0,
        epochs=30,
        batch_size=16,
        lr=4e-3,
        warmup_steps=200,
        grad_clip=5.0,
        average_last=5,
        seed=0,
        strategy="maskctc",
        K=10,
        p_thres=None,
    ):
        self.vocab_size = vocab_size
        self.architecture = architecture
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.attn_dim = attn_dim
        self.num_heads = num_heads
        self.ffn_dim = ffn_dim
        self.conv_kernel = conv_kernel
        self.downsample = downsample
        self.dropout = dropout
        self.alpha = alpha
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.grad_clip = grad_clip
        self.average_last = average_last
        self.seed = seed
        self.strategy = strategy
        self.K = K
        self.p_thres = p_thres

    def _train_config(self):
        return TrainConfig(**{k: getattr(self, k) for k in _TRAIN_KEYS})

    def _decode_config(self):
        return DecodeConfig(self.strategy, K=self.K, p_thres=self.p_thres)

    def fit(self, X, y):
        X = check_features(X, min_frames=self.downsample)
        if self.vocab_size is None:
            vocab_size = 1 + max((int(t) for seq in y for t in seq), default=0)
        else:
            vocab_size = check_positive_int(self.vocab_size, "vocab_size")
        y = check_token_sequences(y, vocab_size, n=len(X))
        cfg = self._train_config()
        self._decode_config()
        self.vocab_ = Vocabulary.of_size(vocab_size)
        self.n_features_in_ = X[0].shape[1]
        trainer = Trainer(cfg, self.vocab_, self.n_features_in_)
        trainer.fit([Utterance(f"u{i}", x, r) for i, (x, r) in enumerate(zip(X, y))])
        self.model_ = trainer.averaged().build().eval()
        self.history_ = trainer.history
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise AttributeError("this MaskCTCRecognizer is not fitted yet; call fit first")

    def predict(self, X):
        self._check_fitted()
        X = check_features(X, input_dim=self.n_features_in_, min_frames=self.downsample)
        cfg = self._decode_config()
        return [recognize(self.model_, x, cfg)[0] for x in X]

    def predict_with_traces(self, X):
        self._check_fitted()
        X = check_features(X, input_dim=self.n_features_in_, min_frames=self.downsample)
        cfg = self._decode_config()
        out = [recognize(self.model_, x, cfg) for x in X]
        return [o[0] for o in out], [o[1] for o in out]

    def score(self, X, y):
        hyps = self.predict(X)
        refs = check_token_sequences(y, self.vocab_.n_tokens, n=len(hyps))
        return 1.0 - error_rate(hyps, refs)
