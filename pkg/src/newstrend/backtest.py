"""Daily top-K trading simulation with transaction costs.

Each trading date the model scores every stock that has a full news window,
the K best scores form the target portfolio, and the ledger trades only the
difference between current and target positions (cost applies per side on
traded notional).  The final date liquidates everything so the reported
return is realized cash.  A cost-free equal-weight buy-and-hold over all
stocks serves as the market baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date as date_t

import numpy as np

from . import kernels
from .corpus import PriceBar, Sample, Trend
from .model import ModelParams, _flags, _packed, window_arrays

# Trades below this fraction of wealth are noise from float rounding when a
# position is already at target; skipping them keeps "no trade" exact.
REBALANCE_TOLERANCE = 1e-12


@dataclass
class BacktestConfig:
    k: int = 10
    cost_rate: float = 0.003
    initial_capital: float = 1.0
    trading_days_per_year: int = 250
    full_turnover: bool = False  # liquidate and re-enter the whole book daily

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.cost_rate < 1.0:
            raise ValueError("cost_rate must lie in [0, 1)")
        if self.initial_capital <= 0:
            raise ValueError("initial_capital must be positive")


@dataclass
class PortfolioState:
    cash: float
    holdings: dict[str, float] = field(default_factory=dict)  # stock -> shares


@dataclass
class Trade:
    date: date_t
    stock_id: str
    side: str  # "buy" or "sell"
    shares: float
    price: float
    cost: float


@dataclass
class BacktestResult:
    curve: list[tuple[date_t, float]]
    baseline: list[tuple[date_t, float]]
    annualized_return: float
    baseline_annualized: float
    final_value: float
    trades: list[Trade]
    skipped: list[tuple[date_t, str, str]]  # date, stock, reason


def score_stocks(params: ModelParams, samples: list[Sample]) -> dict[str, float]:
    """Rising-minus-declining probability per stock for one date."""
    if not samples:
        return {}
    probs = kernels.batch_probs(
        [window_arrays(s) for s in samples], _flags(params.hyper), _packed(params)
    )
    return {
        s.stock_id: float(p[Trend.UP] - p[Trend.DOWN]) for s, p in zip(samples, probs)
    }


def select_top_k(scores: dict[str, float], k: int) -> list[str]:
    """K highest-scoring stocks, ties by stock id; all of them if fewer."""
    if not scores:
        raise ValueError("select_top_k needs at least one score")
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [stock for stock, _ in ranked[:k]]


def rebalance(
    state: PortfolioState,
    targets: list[str],
    opens: dict[str, float],
    cost_rate: float,
    *,
    full_turnover: bool = False,
    day: date_t | None = None,
    trades: list[Trade] | None = None,
    skipped: list | None = None,
) -> float:
    """Trade the book toward an equal-value split over ``targets``.

    Sells positions not in ``targets`` (held stocks with no price today are
    carried), then trades each target's difference from the equal split,
    buys scaled to the cash actually available after sell-side costs.
    Returns total cost paid; wealth after equals wealth before minus cost.
    """

    def record(side, stock, shares, price, cost):
        if trades is not None and day is not None:
            trades.append(Trade(day, stock, side, shares, price, cost))

    cost_paid = 0.0
    target_set = set(targets)
    for stock in sorted(state.holdings):
        if stock in target_set and not full_turnover:
            continue
        price = opens.get(stock)
        if price is None:
            if skipped is not None and day is not None:
                skipped.append((day, stock, "no_price_carry"))
            continue
        shares = state.holdings.pop(stock)
        notional = shares * price
        cost = cost_rate * notional
        state.cash += notional - cost
        cost_paid += cost
        record("sell", stock, shares, price, cost)

    if not targets:
        return cost_paid

    held_value = {s: state.holdings.get(s, 0.0) * opens[s] for s in targets}
    wealth = state.cash + sum(held_value.values())
    per_stock = wealth / len(targets)
    tol = REBALANCE_TOLERANCE * max(wealth, 1.0)

    for stock in sorted(targets):
        excess = held_value[stock] - per_stock
        if excess > tol:
            price = opens[stock]
            shares = excess / price
            cost = cost_rate * excess
            state.holdings[stock] -= shares
            state.cash += excess - cost
            cost_paid += cost
            record("sell", stock, shares, price, cost)

    deficits = {s: per_stock - held_value[s] for s in targets if per_stock - held_value[s] > tol}
    total_deficit = sum(deficits.values())
    if total_deficit > 0.0 and state.cash > 0.0:
        scale = min(1.0, state.cash / total_deficit)
        for stock in sorted(deficits):
            outlay = deficits[stock] * scale
            price = opens[stock]
            cost = cost_rate * outlay
            shares = outlay * (1.0 - cost_rate) / price
            state.holdings[stock] = state.holdings.get(stock, 0.0) + shares
            state.cash -= outlay
            cost_paid += cost
            record("buy", stock, shares, price, cost)
    return cost_paid


def mark_to_market(state: PortfolioState, last_price: dict[str, float]) -> float:
    return state.cash + sum(
        shares * last_price[stock] for stock, shares in state.holdings.items()
    )


def annualized_return(curve_values, trading_days_per_year: int) -> float:
    """Geometric annualization of first-to-last growth over the curve."""
    values = [v for v in curve_values]
    if len(values) < 2:
        raise ValueError("need at least 2 curve points")
    growth = values[-1] / values[0]
    exponent = trading_days_per_year / (len(values) - 1)
    return float(growth**exponent - 1.0)


def market_baseline(
    prices: list[PriceBar], dates: list[date_t], initial_capital: float = 1.0
) -> list[tuple[date_t, float]]:
    """Cost-free equal-weight hold of every stock, normalized to capital.

    A stock missing a date's price is carried at its last observed open; a
    stock with no observation yet contributes flat until it first trades.
    """
    if len(dates) < 2:
        raise ValueError("need at least 2 dates")
    by_date: dict[date_t, list[PriceBar]] = {}
    for bar in prices:
        by_date.setdefault(bar.date, []).append(bar)
    stocks = sorted({bar.stock_id for bar in prices})
    first_seen: dict[str, float] = {}
    last_seen: dict[str, float] = {}
    curve = []
    for day in sorted(dates):
        for bar in by_date.get(day, []):
            first_seen.setdefault(bar.stock_id, bar.open)
            last_seen[bar.stock_id] = bar.open
        ratios = [
            last_seen[s] / first_seen[s] if s in first_seen else 1.0 for s in stocks
        ]
        curve.append((day, initial_capital * float(np.mean(ratios))))
    # normalize so the curve starts exactly at the initial capital
    base = curve[0][1]
    return [(d, initial_capital * v / base) for d, v in curve]


def run_backtest(
    params: ModelParams,
    samples_by_date: dict[date_t, list[Sample]],
    prices: list[PriceBar],
    config: BacktestConfig,
) -> BacktestResult:
    """Score, select and rebalance at each date's open; liquidate at the end."""
    dates = sorted(samples_by_date)
    if len(dates) < 2:
        raise ValueError("backtest needs at least 2 trading dates")
    opens_by_date: dict[date_t, dict[str, float]] = {}
    for bar in prices:
        opens_by_date.setdefault(bar.date, {})[bar.stock_id] = bar.open

    state = PortfolioState(cash=config.initial_capital)
    last_price: dict[str, float] = {}
    trades: list[Trade] = []
    skipped: list[tuple[date_t, str, str]] = []
    curve: list[tuple[date_t, float]] = []

    for day in dates:
        opens = opens_by_date.get(day, {})
        last_price.update(opens)
        curve.append((day, mark_to_market(state, last_price)))
        if day == dates[-1]:
            cost = rebalance(
                state, [], opens, config.cost_rate, day=day, trades=trades, skipped=skipped
            )
            final_value = state.cash
            if state.holdings:  # positions carried for lack of a price
                final_value = mark_to_market(state, last_price)
            curve[-1] = (day, final_value)
            break
        scorable = []
        for sample in samples_by_date[day]:
            if sample.stock_id not in opens:
                skipped.append((day, sample.stock_id, "no_price_for_score"))
            else:
                scorable.append(sample)
        stock_scores = score_stocks(params, scorable)
        if not stock_scores:
            continue
        targets = select_top_k(stock_scores, config.k)
        rebalance(
            state,
            targets,
            opens,
            config.cost_rate,
            full_turnover=config.full_turnover,
            day=day,
            trades=trades,
            skipped=skipped,
        )

    baseline = market_baseline(prices, dates, config.initial_capital)
    return BacktestResult(
        curve=curve,
        baseline=baseline,
        annualized_return=annualized_return([v for _, v in curve], config.trading_days_per_year),
        baseline_annualized=annualized_return(
            [v for _, v in baseline], config.trading_days_per_year
        ),
        final_value=curve[-1][1],
        trades=trades,
        skipped=skipped,
    )


def write_curves(path, result: BacktestResult) -> None:
    baseline = dict(result.baseline)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("date,portfolio_value,baseline_value\n")
        for day, value in result.curve:
            fh.write(f"{day.isoformat()},{value!r},{baseline[day]!r}\n")


def write_trades(path, trades: list[Trade]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("date,stock_id,side,shares,price,cost\n")
        for t in trades:
            fh.write(
                f"{t.date.isoformat()},{t.stock_id},{t.side},{t.shares!r},{t.price!r},{t.cost!r}\n"
            )
