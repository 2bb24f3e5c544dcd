"""Deterministic synthetic request corpora for desk-scale runs.

The generated traffic mimics a small e-commerce application: a handful of
paths, short query strings drawn from fixed value pools (so every token
recurs), and two attack families (SQL injection and cross-site scripting)
injected into one parameter value.
"""

from __future__ import annotations

import random
from urllib.parse import quote_plus

from .ingest import ABNORMAL, NORMAL, RawRequestRecord, RequestCorpus, normalize_request

_ENDPOINTS = [
    ("/index.jsp", [("seccion", ["3", "7", "21"]), ("idioma", ["es", "en"])]),
    ("/pagar.jsp", [("modo", ["insertar", "consultar", "anadir"]),
                    ("precio", ["23", "85", "110", "57"]),
                    ("b1", ["pasar", "confirmar"])]),
    ("/carrito.jsp", [("modo", ["insertar", "consultar"]),
                      ("id", ["2", "9", "14", "31"]),
                      ("cantidad", ["1", "3", "5"])]),
    ("/entrar.jsp", [("usuario", ["ana", "pablo", "marta", "luis"]),
                     ("clave", ["secreto", "claveazul", "invierno"])]),
    ("/buscar.jsp", [("q", ["rosas", "libros", "vino", "queso"]),
                     ("pagina", ["1", "2", "4"])]),
]

_SQLI_PAYLOADS = [
    "' or 1=1 --",
    "'; select * from usuarios --",
    "1' union select clave from usuarios --",
    "admin'--",
]

_XSS_PAYLOADS = [
    "<script>alert(1)</script>",
    "<img src=x onerror=alert(1)>",
    "<svg onload=alert('xss')>",
]

ATTACK_TYPES = ("sqli", "xss")


def _normal_raw(rng: random.Random) -> str:
    path, params = rng.choice(_ENDPOINTS)
    method = rng.choice(["GET", "GET", "POST"])
    chosen = rng.sample(params, k=rng.randint(max(1, len(params) - 1), len(params)))
    query = "&".join(f"{name}={quote_plus(rng.choice(pool))}"
                     for name, pool in sorted(chosen))
    return f"{method} {path}?{query} HTTP/1.1"


def _attack_raw(rng: random.Random, attack_type: str) -> str:
    path, params = rng.choice(_ENDPOINTS)
    payloads = _SQLI_PAYLOADS if attack_type == "sqli" else _XSS_PAYLOADS
    name, pool = rng.choice(params)
    parts = [f"{name}={quote_plus(rng.choice(payloads))}"]
    for other_name, other_pool in params:
        if other_name != name and rng.random() < 0.5:
            parts.append(f"{other_name}={quote_plus(rng.choice(other_pool))}")
    query = "&".join(sorted(parts))
    return f"GET {path}?{query} HTTP/1.1"


def make_desk_corpus(n: int = 200, seed: int = 0,
                     abnormal_fraction: float = 0.3) -> RequestCorpus:
    """n labeled requests with two attack types, deterministic per seed."""
    rng = random.Random(seed)
    n_abnormal = round(n * abnormal_fraction)
    records = []
    for i in range(n):
        if i < n_abnormal:
            attack_type = ATTACK_TYPES[i % len(ATTACK_TYPES)]
            raw = normalize_request(_attack_raw(rng, attack_type))
            label = ABNORMAL
        else:
            attack_type = None
            raw = normalize_request(_normal_raw(rng))
            label = NORMAL
        records.append(RawRequestRecord(
            id=f"demo-{i:04d}", raw=raw, label=label,
            source_dataset="demo", attack_type=attack_type))
    return RequestCorpus(records)


_MEMORIZATION_REQUESTS = [
    "get /pagar.jsp modo=insertar&precio=23",
    "post /carrito.jsp modo=consultar&id=85",
    "get /buscar.jsp q=rosas&pagina=2",
    "post /entrar.jsp usuario=ana&clave=secreto",
    "get /index.jsp seccion=7&idioma=es",
]


def make_memorization_corpus() -> RequestCorpus:
    """Ten requests (five distinct, each twice): every token occurs at least
    twice and every context determines its tokens uniquely, so an overfitted
    model can recover any masked token."""
    records = []
    for copy in range(2):
        for i, raw in enumerate(_MEMORIZATION_REQUESTS):
            records.append(RawRequestRecord(
                id=f"demo-mem-{copy}{i}", raw=raw, label=NORMAL,
                source_dataset="demo"))
    return RequestCorpus(records)
