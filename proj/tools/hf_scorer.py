#!/usr/bin/env python3
"""Scorer process for masked language models from the transformers library.

Speaks the line-delimited JSON protocol on stdin/stdout, so it can stand
behind `dlgresp score --backend 'proto:python3 tools/hf_scorer.py MODEL'`.

    python3 tools/hf_scorer.py bert-base-uncased
    python3 tools/hf_scorer.py --random-tiny      # offline smoke model
"""

import argparse
import json
import logging
import sys

import torch

MASK_MARKER = "[MASK]"
SCHEMA_VERSION = 1

log = logging.getLogger("hf_scorer")


class ProtocolError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def tiny_vocabulary(lexicon_path):
    words = {
        "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
        ",", ".", "\"", "'", "!", "?", "-",
        "a", "an", "the", "who", "and", "no", "wait", "not", "said", "replied", "he", "she",
    }
    if lexicon_path:
        with open(lexicon_path, encoding="utf-8") as f:
            lex = json.load(f)
        for key in ("auxiliaries", "occupations", "names", "pronouns"):
            for w in lex.get(key, []):
                words.update(w.lower().split())
        for phrases in lex.get("verb_phrases", {}).values():
            for p in phrases:
                words.update(p.lower().replace("-", " - ").split())
    return {w: i for i, w in enumerate(sorted(words))}


def random_tiny(lexicon_path, seed):
    """Randomly initialised BERT with a word-level vocabulary; needs no downloads."""
    from tokenizers import Tokenizer, normalizers, pre_tokenizers
    from tokenizers.models import WordLevel
    from tokenizers.processors import TemplateProcessing
    from transformers import BertConfig, BertForMaskedLM, PreTrainedTokenizerFast

    vocab = tiny_vocabulary(lexicon_path)
    tok = Tokenizer(WordLevel(vocab, unk_token="[UNK]"))
    tok.normalizer = normalizers.Lowercase()
    tok.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    tok.post_processor = TemplateProcessing(
        single="[CLS] $A [SEP]",
        special_tokens=[("[CLS]", vocab["[CLS]"]), ("[SEP]", vocab["[SEP]"])],
    )
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=tok,
        unk_token="[UNK]", pad_token="[PAD]", cls_token="[CLS]", sep_token="[SEP]",
        mask_token="[MASK]",
    )
    torch.manual_seed(seed)
    config = BertConfig(
        vocab_size=len(vocab), hidden_size=32, num_hidden_layers=2, num_attention_heads=2,
        intermediate_size=64, max_position_embeddings=256,
    )
    return tokenizer, BertForMaskedLM(config)


class Scorer:
    def __init__(self, tokenizer, model, model_id, batch_size):
        if not tokenizer.is_fast:
            raise SystemExit("a fast tokenizer is required for character offsets")
        if tokenizer.mask_token is None:
            raise SystemExit(f"{model_id} has no mask token")
        self.tok = tokenizer
        self.model = model.eval()
        self.model_id = model_id
        self.batch_size = batch_size

    def hello(self, _req):
        return {
            "model_id": self.model_id,
            "capabilities": ["sequence_logprob", "masked_candidates", "embeddings"],
            "style": "masked",
            "concurrent": False,
            "schema_version": SCHEMA_VERSION,
        }

    def _encode(self, text):
        enc = self.tok(text, return_tensors="pt", return_offsets_mapping=True,
                       return_special_tokens_mask=True, truncation=True)
        offsets = enc.pop("offset_mapping")[0].tolist()
        special = enc.pop("special_tokens_mask")[0].tolist()
        return enc, offsets, special

    @torch.no_grad()
    def sequence(self, req):
        text = req.get("text", "")
        enc, _, special = self._encode(text)
        ids = enc["input_ids"][0]
        positions = [i for i, s in enumerate(special) if not s]
        if not positions:
            raise ProtocolError("backend_error", "text has no content tokens")
        total = 0.0
        for start in range(0, len(positions), self.batch_size):
            chunk = positions[start:start + self.batch_size]
            batch = ids.repeat(len(chunk), 1)
            for row, pos in enumerate(chunk):
                batch[row, pos] = self.tok.mask_token_id
            attn = enc["attention_mask"].repeat(len(chunk), 1)
            logits = self.model(input_ids=batch, attention_mask=attn).logits
            logp = torch.log_softmax(logits.float(), dim=-1)
            for row, pos in enumerate(chunk):
                total += logp[row, pos, ids[pos]].item()
        return {"total": total, "n_tokens": len(positions)}

    def _candidate_id(self, candidate):
        pieces = self.tok(candidate, add_special_tokens=False)["input_ids"]
        if len(pieces) != 1:
            raise ProtocolError("multi_token_candidate",
                                f"candidate \"{candidate}\" is {len(pieces)} tokens")
        if pieces[0] == self.tok.unk_token_id:
            raise ProtocolError("backend_error", f"candidate \"{candidate}\" is out of vocabulary")
        return pieces[0]

    @torch.no_grad()
    def masked(self, req):
        masked_text = req.get("masked_text", "")
        if masked_text.count(MASK_MARKER) != 1:
            raise ProtocolError("bad_request", "masked_text needs exactly one [MASK]")
        candidates = req.get("candidates", [])
        ids = {c: self._candidate_id(c) for c in candidates}
        text = masked_text.replace(MASK_MARKER, self.tok.mask_token)
        enc, _, _ = self._encode(text)
        where = (enc["input_ids"][0] == self.tok.mask_token_id).nonzero().flatten().tolist()
        if len(where) != 1:
            raise ProtocolError("backend_error", "mask did not survive tokenization")
        logits = self.model(**enc).logits[0, where[0]]
        logp = torch.log_softmax(logits.float(), dim=-1)
        return {"logprobs": {c: logp[i].item() for c, i in ids.items()}}

    @torch.no_grad()
    def embed(self, req):
        text = req.get("text", "")
        enc, offsets, special = self._encode(text)
        out = self.model(**enc, output_hidden_states=True)
        last = out.hidden_states[-1][0]
        rows = []
        for i, (s, (b, e)) in enumerate(zip(special, offsets)):
            if s or e <= b:
                continue
            rows.append({"token": text[b:e], "start": b, "end": e,
                         "vector": [round(v, 7) for v in last[i].tolist()]})
        return {"embeddings": rows}

    def handle(self, req):
        op = req.get("op")
        handler = {"hello": self.hello, "sequence": self.sequence, "masked": self.masked,
                   "embed": self.embed}.get(op)
        if handler is None:
            raise ProtocolError("bad_request", f"unknown op \"{op}\"")
        return handler(req)


def serve(scorer, stdin, stdout):
    for line in stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
        except json.JSONDecodeError as e:
            reply = {"error": "bad_request", "message": str(e)}
        else:
            if req.get("op") == "shutdown":
                break
            try:
                reply = scorer.handle(req)
            except ProtocolError as e:
                reply = {"error": e.code, "message": str(e)}
            except Exception as e:  # noqa: BLE001
                log.exception("request failed")
                reply = {"error": "backend_error", "message": str(e)}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("model", nargs="?", help="model name or local directory")
    p.add_argument("--random-tiny", action="store_true",
                   help="use a small randomly initialised model instead")
    p.add_argument("--lexicon", help="lexicon JSON for the --random-tiny vocabulary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--threads", type=int, default=0, help="torch intra-op threads (0: default)")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)

    if args.threads:
        torch.set_num_threads(args.threads)
    if args.random_tiny:
        tokenizer, model = random_tiny(args.lexicon, args.seed)
        model_id = f"random-tiny-bert:seed={args.seed}"
    elif args.model:
        from transformers import AutoModelForMaskedLM, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(args.model)
        model = AutoModelForMaskedLM.from_pretrained(args.model)
        model_id = args.model
    else:
        p.error("give a model name or --random-tiny")
    serve(Scorer(tokenizer, model, model_id, args.batch_size), sys.stdin, sys.stdout)


if __name__ == "__main__":
    main()
