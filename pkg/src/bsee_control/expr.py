"""Tiny arithmetic expression language for coefficient specs.

Grammar (EBNF)::

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = [ "+" | "-" ] power ;
    power   = atom [ "**" unary ] ;
    atom    = number | name | call | "(" expr ")" ;
    call    = func "(" expr ")" ;
    func    = "sin" | "cos" | "exp" | "sqrt" | "abs" ;
    name    = "t" | "W" | "x" | "x1" | "x2" | "pi" ;

``x`` is the first space coordinate (``x1`` its alias). Parsing goes through
Python's ``ast`` module; any node outside the grammar is rejected, so no
code is ever executed.
"""

import ast

import numpy as np

FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt, "abs": np.abs}
VARS = {"t", "W", "x", "x1", "x2"}
CONSTS = {"pi": np.pi}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power}


class ExprError(ValueError):
    pass


class Expr:
    """A parsed expression; call it with keyword arrays ``t``, ``W``, ``x1``, ``x2``."""

    def __init__(self, source):
        self.source = str(source)
        try:
            tree = ast.parse(self.source.strip(), mode="eval")
        except SyntaxError as exc:
            raise ExprError(f"cannot parse {self.source!r} at column {exc.offset}: {exc.msg}") from None
        self.variables = set()
        self._check(tree.body)
        self._tree = tree.body

    def _check(self, node):
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
            self._check(node.operand)
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            pass
        elif isinstance(node, ast.Name):
            if node.id in VARS:
                self.variables.add("x1" if node.id == "x" else node.id)
            elif node.id not in CONSTS:
                raise ExprError(f"unknown name {node.id!r} in {self.source!r}")
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in FUNCS and len(node.args) == 1 and not node.keywords:
            self._check(node.args[0])
        else:
            col = getattr(node, "col_offset", 0)
            raise ExprError(f"unsupported syntax at column {col + 1} in {self.source!r}")

    @property
    def uses_time(self):
        return "t" in self.variables

    @property
    def uses_path(self):
        return "W" in self.variables

    @property
    def uses_space(self):
        return bool(self.variables & {"x1", "x2"})

    def __call__(self, t=0.0, W=0.0, x1=0.0, x2=0.0):
        env = dict(t=t, W=W, x=x1, x1=x1, x2=x2, **CONSTS)
        with np.errstate(all="ignore"):
            return np.asarray(self._eval(self._tree, env), dtype=float)

    def _eval(self, node, env):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, env)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id]
        return FUNCS[node.func.id](self._eval(node.args[0], env))

    def __repr__(self):
        return f"Expr({self.source!r})"


def parse(value):
    """Numbers stay numbers; strings become :class:`Expr`."""
    if isinstance(value, bool):
        raise ExprError("booleans are not coefficients")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        return Expr(value)
    raise ExprError(f"expected a number or an expression string, got {type(value).__name__}")
