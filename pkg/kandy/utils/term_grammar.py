"""
Parser for lift-term strings such as "x*z", "x1^2+x2^2-x3^2-x4^2",
"u*u_xx", "x*cos(theta)" or "1".

Grammar:
    term    := ['-'] product (('+' | '-') product)*
    product := factor ('*' factor)*
    factor  := atom [('^' | '**') INT]
    atom    := NUMBER | VAR | FIELD '_' ('x' | 'xx' | 'xxxx') | ('cos' | 'sin') '(' 'theta' ')'
"""
import re
from dataclasses import dataclass
from typing import List, Sequence, Tuple

_TOKEN = re.compile(r"\s*(?:(\d+\.\d*|\.\d+|\d+)|(\*\*|[\^*+\-()])|([A-Za-z][A-Za-z0-9_]*))")
_DERIV = re.compile(r"^(?P<base>[A-Za-z][A-Za-z0-9]*)_(?P<order>x+)$")
TRIG_FUNCS = ("cos", "sin")
DERIVATIVE_ORDERS = (1, 2, 4)


@dataclass(frozen=True)
class Symbol:
    kind: str           # "var" | "deriv" | "trig"
    name: str
    order: int = 0      # derivative order for "deriv"


@dataclass(frozen=True)
class Factor:
    symbol: Symbol
    power: int


@dataclass(frozen=True)
class Monomial:
    coef: float
    factors: Tuple[Factor, ...]


def tokenize(text: str) -> List[Tuple[str, str]]:
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ValueError(f"Unexpected character in term '{text}' at position {pos}")
        number, op, ident = m.groups()
        if number is not None:
            tokens.append(("num", number))
        elif op is not None:
            tokens.append(("op", "^" if op == "**" else op))
        else:
            tokens.append(("ident", ident))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, variables: Sequence[str], is_field: bool):
        self.text = text
        self.tokens = tokenize(text)
        self.pos = 0
        self.variables = tuple(variables)
        self.is_field = is_field

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            want = value or kind or "token"
            raise ValueError(f"Malformed term '{self.text}': expected {want}")
        self.pos += 1
        return tok

    def term(self) -> List[Monomial]:
        sign = 1.0
        if self.peek() == ("op", "-"):
            self.take()
            sign = -1.0
        monomials = [self.product(sign)]
        while self.peek() in (("op", "+"), ("op", "-")):
            _, op = self.take()
            monomials.append(self.product(1.0 if op == "+" else -1.0))
        if self.pos != len(self.tokens):
            raise ValueError(f"Malformed term '{self.text}': trailing input")
        return monomials

    def product(self, sign: float) -> Monomial:
        coef = sign
        powers = {}
        while True:
            value, symbol, power = self.factor()
            if symbol is None:
                coef *= value ** power
            elif power:
                powers[symbol] = powers.get(symbol, 0) + power
            if self.peek() != ("op", "*"):
                break
            self.take()
        factors = tuple(Factor(s, p) for s, p in powers.items())
        return Monomial(coef, factors)

    def factor(self):
        kind, text = self.peek()
        if kind == "num":
            self.take()
            value, symbol = float(text), None
        elif kind == "ident":
            value, symbol = 1.0, self.symbol()
        else:
            raise ValueError(f"Malformed term '{self.text}': unexpected '{text}'")
        power = 1
        if self.peek() == ("op", "^"):
            self.take()
            power = int(self.take("num")[1])
        return value, symbol, power

    def symbol(self) -> Symbol:
        _, name = self.take("ident")
        if name in TRIG_FUNCS and self.peek() == ("op", "("):
            if self.is_field:
                raise ValueError(f"Trigonometric features are not available for fields: '{self.text}'")
            self.take("op", "(")
            self.take("ident", "theta")
            self.take("op", ")")
            return Symbol("trig", name)
        if name in self.variables:
            return Symbol("deriv", name, 0) if self.is_field else Symbol("var", name)
        m = _DERIV.match(name)
        if m and self.is_field and m.group("base") in self.variables:
            order = len(m.group("order"))
            if order not in DERIVATIVE_ORDERS:
                raise ValueError(f"Derivative order {order} of '{name}' not in {DERIVATIVE_ORDERS}")
            return Symbol("deriv", m.group("base"), order)
        raise ValueError(f"Unknown symbol '{name}' in term '{self.text}'")


def parse_term(text: str, variables: Sequence[str], is_field: bool = False) -> List[Monomial]:
    """Parse one term string into a signed sum of monomials."""
    if not text or not text.strip():
        raise ValueError("Empty lift term")
    return _Parser(text, variables, is_field).term()


def canonical_label(text: str) -> str:
    return re.sub(r"\s+", "", text).replace("**", "^")
