"""Small synthetic training sets shared by the training and acceptance tests."""

from __future__ import annotations

from avwhisper.features import log_mel
from avwhisper.lipgeom import crop_video
from avwhisper.model import CharTokenizer, ModelConfig, build_model
from avwhisper.synth import make_synthetic_corpus
from avwhisper.train import make_example, make_pairs


def examples_from(corpus, with_lips=True):
    recs = corpus.manifest.records
    tok = CharTokenizer.from_texts(r.text for r in recs.values())
    ex = {}
    for u, r in recs.items():
        lips = None
        if with_lips and u in corpus.video:
            lips = crop_video(corpus.video[u], corpus.landmarks[u])
        ex[u] = make_example(u, r.speech_type, r.language, r.text, log_mel(corpus.audio[u]).frames, tok, lips)
    return tok, ex


def small_setup(n_speakers=2, n_utts=3, seed=0, video_fraction=0.5, with_lips=True, **model_kw):
    corpus = make_synthetic_corpus(n_speakers, n_utts, seed=seed, video_fraction=video_fraction, min_len=2, max_len=4)
    tok, ex = examples_from(corpus, with_lips)
    kw = dict(d_model=32, n_heads=2, visual_dim=16)
    kw.update(model_kw)
    model = build_model(ModelConfig(vocab=tok.vocab, **kw), seed=seed)
    return corpus, tok, ex, make_pairs(corpus.manifest, ex), model
