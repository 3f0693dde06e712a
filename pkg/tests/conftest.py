import pytest
import torch

from petaug.augment import default_synonyms
from petaug.data import Featurizer, Vocabulary, bundled_task
from petaug.model import Encoder, ModelConfig
from petaug.pretrain import WarmStartConfig, unlabeled_pool, warm_start

torch.set_num_threads(1)

_CRITERIA_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.stash[_CRITERIA_KEY] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    results = item.config.stash[_CRITERIA_KEY]
    if number in results:
        # several tests may cover one criterion: it passes only if all of them do
        _, passed_before, detail_before = results[number]
        detail = "; ".join(d for d in (detail_before, detail) if d)
        results[number] = (title, passed_before and report.passed, detail)
    else:
        results[number] = (title, report.passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_CRITERIA_KEY]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


# Shared desk-scale setup ---------------------------------------------------

class SentimentSetup:
    """The bundled 50-example sentiment task with a warm-started backbone."""

    def __init__(self):
        self.train, self.val, self.spec = bundled_task("synthetic-sentiment", 50, 100, seed=0)
        self.vocab = Vocabulary.build(self.train)
        self.featurizer = Featurizer(self.vocab, 64)
        self.config = ModelConfig(vocab_size=len(self.vocab), max_seq_len=64)
        backbone = Encoder(self.config, seed=0)
        warm_start(backbone, unlabeled_pool("synthetic-sentiment"), self.featurizer, default_synonyms().mapping,
                   WarmStartConfig())
        self.state = {k: v.clone() for k, v in backbone.state_dict().items()}

    def fresh_model(self):
        model = Encoder(self.config)
        model.load_state_dict(self.state)
        return model


@pytest.fixture(scope="session")
def sentiment_setup():
    return SentimentSetup()


@pytest.fixture
def tiny_config():
    return ModelConfig(num_layers=2, num_heads=2, model_dim=16, ff_dim=32, vocab_size=40, max_seq_len=12,
                       hidden_dropout=0.1, num_classes=2)


def random_batch(config, batch_size=4, seq_len=None, seed=0, min_len=2):
    """Random ids with CLS first and a random-length unmasked prefix per row."""
    from petaug.model import CLS_ID, PAD_ID, TokenBatch

    gen = torch.Generator().manual_seed(seed)
    n = seq_len or config.max_seq_len
    ids = torch.randint(4, config.vocab_size, (batch_size, n), generator=gen)
    ids[:, 0] = CLS_ID
    lengths = torch.randint(min_len, n + 1, (batch_size,), generator=gen)
    mask = (torch.arange(n)[None] < lengths[:, None]).long()
    ids = torch.where(mask.bool(), ids, torch.full_like(ids, PAD_ID))
    labels = torch.arange(batch_size) % config.num_classes
    return TokenBatch(ids, mask, labels)


def central_difference(loss_fn, tensor, eps=1e-6):
    """Numerical gradient of a scalar ``loss_fn()`` w.r.t. ``tensor`` (perturbed in place)."""
    flat = tensor.data.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = float(loss_fn())
            flat[i] = old - eps
            down = float(loss_fn())
            flat[i] = old
            grad[i] = (up - down) / (2 * eps)
    return grad.view_as(tensor)


def relative_error(a, b):
    return float((a - b).norm()) / max(float(a.norm()), float(b.norm()), 1e-7)


def assert_gradients_match(loss_fn, tensors, tol=1e-3):
    """Analytic (autograd) vs central-difference gradients, per tensor, in double precision."""
    for t in tensors:
        assert t.dtype == torch.float64
        t.grad = None
    loss_fn().backward()
    errors = []
    for t in tensors:
        numeric = central_difference(loss_fn, t)
        errors.append(relative_error(t.grad, numeric))
    assert max(errors) < tol, errors
    return errors
