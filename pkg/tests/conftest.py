import numpy as np
import pytest

from absa_pair.auxpair import DEFAULT_TEMPLATES, AuxMode, build_auxiliary
from absa_pair.corpus import POLARITIES, Corpus
from absa_pair.encoder import EncoderConfig, init_params
from absa_pair.synthetic import make_corpus
from absa_pair.tokenizer import Batch, train_vocab

# Two annotated Digikala reviews, each with two aspects.
BACKPACK = (
    "این کوله پشتی کیفیت متوسط و تا حدودی قابل قبولی داره ولی به هیچ وجه به این قیمت "
    "نمیارزه نهایتا یک سوم این قیمت ارزش واقعیشه"
)
CAMERA = "دکمه زومش به جای زوم عکس میگیره ولی رنگش خوبه کیفیتشم خیلی پایینه درکل پیشنهاد نمیکنم"


@pytest.fixture
def table_corpus() -> Corpus:
    return Corpus.from_records([
        ("1", BACKPACK, "کیفیت", "neutral"),
        ("1", BACKPACK, "قیمت", "negative"),
        ("2", CAMERA, "رنگ", "positive"),
        ("2", CAMERA, "کیفیت", "negative"),
    ])


@pytest.fixture(scope="session")
def synthetic32() -> Corpus:
    return make_corpus(32, seed=0)


def vocab_for(corpus, templates=DEFAULT_TEMPLATES["fa"], size=200):
    texts = [i.text for i in corpus]
    for inst in corpus:
        for mode in AuxMode:
            if mode.is_binary:
                texts += [build_auxiliary(inst.aspect, mode, templates, p) for p in POLARITIES]
            else:
                texts.append(build_auxiliary(inst.aspect, mode, templates))
    return train_vocab(texts, size)


@pytest.fixture(scope="session")
def synthetic_vocab(synthetic32):
    return vocab_for(synthetic32)


def random_batch(rng, n=4, length=10, vocab_size=30, num_classes=3, pads=(0, 3, 5, 0)):
    """CLS-first random sequences with trailing padding of the given lengths."""
    ids = rng.integers(4, vocab_size, size=(n, length))
    ids[:, 0] = 2
    mask = np.ones((n, length), dtype=np.int64)
    for i, p in enumerate(pads[:n]):
        if p:
            mask[i, length - p:] = 0
    ids[mask == 0] = 0
    seg = np.zeros((n, length), dtype=np.int64)
    seg[:, length // 2:] = 1
    seg[mask == 0] = 0
    labels = rng.integers(0, num_classes, size=n)
    return Batch(ids, seg, mask, labels)


TINY = dict(num_layers=2, num_heads=2, hidden_size=32, feed_forward_size=128, vocab_size=30, max_len=16)


@pytest.fixture
def tiny_params():
    return init_params(EncoderConfig(**TINY, num_classes=3, dropout_rate=0.1, seed=3))


def gradient_check(params, batch, dropout_seed=5, step=1e-5, max_entries=None, sample_seed=0, floor=1e-6):
    """Worst relative error per tensor between analytic and central-difference gradients.

    The error of a tensor is max|analytic - numeric| / max(max|analytic|, max|numeric|, floor).
    The floor keeps tensors whose true gradient is zero (key biases) from dividing
    rounding noise by rounding noise.
    ``max_entries`` caps the entries probed per tensor (chosen at random).
    """
    from absa_pair.encoder import forward
    from absa_pair.training import backward, cross_entropy

    def loss():
        logits, _ = forward(params, batch, "train", np.random.default_rng(dropout_seed))
        return cross_entropy(logits, batch.labels)

    _, cache = forward(params, batch, "train", np.random.default_rng(dropout_seed))
    analytic = backward(params, batch, cache)
    pick = np.random.default_rng(sample_seed)
    errors = {}
    for name, a in params.items():
        flat = a.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = pick.choice(flat.size, max_entries, replace=False)
        num = np.zeros(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            up = loss()
            flat[i] = old - step
            down = loss()
            flat[i] = old
            num[j] = (up - down) / (2 * step)
        ana = analytic[name].reshape(-1)[idx]
        scale = max(np.abs(ana).max(), np.abs(num).max(), floor)
        errors[name] = float(np.abs(ana - num).max() / scale)
    return errors


def perturbed(params, scale=0.05, seed=0):
    """Copy with every tensor jittered, so LN scales and zero biases stop being special."""
    out = params.copy()
    rng = np.random.default_rng(seed)
    for a in out.arrays.values():
        a += rng.normal(0.0, scale, a.shape)
    return out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
