#pragma once

#include <array>

// Box geometry on normalized (cx, cy, w, h) boxes. The formulas are
// templated on the scalar so they also evaluate on forward-mode duals.

namespace efh::box {

template <typename S>
S smax(const S& a, const S& b) {
  return a < b ? b : a;
}
template <typename S>
S smin(const S& a, const S& b) {
  return b < a ? b : a;
}

template <typename S>
struct Overlap {
  S inter;
  S uni;
  S enclosing;
};

template <typename S, typename A, typename B>
Overlap<S> overlap(const A& a, const B& b) {
  const S ax0 = S(a[0]) - S(a[2]) / S(2), ax1 = S(a[0]) + S(a[2]) / S(2);
  const S ay0 = S(a[1]) - S(a[3]) / S(2), ay1 = S(a[1]) + S(a[3]) / S(2);
  const S bx0 = S(b[0]) - S(b[2]) / S(2), bx1 = S(b[0]) + S(b[2]) / S(2);
  const S by0 = S(b[1]) - S(b[3]) / S(2), by1 = S(b[1]) + S(b[3]) / S(2);
  const S zero(0);
  const S iw = smax(zero, S(smin(ax1, bx1) - smax(ax0, bx0)));
  const S ih = smax(zero, S(smin(ay1, by1) - smax(ay0, by0)));
  const S inter = iw * ih;
  // Areas from the same corner differences, so identical boxes give IoU 1 exactly.
  const S uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
  const S ew = smax(ax1, bx1) - smin(ax0, bx0);
  const S eh = smax(ay1, by1) - smin(ay0, by0);
  return {inter, uni, ew * eh};
}

template <typename S, typename A, typename B>
S iou(const A& a, const B& b) {
  const auto o = overlap<S>(a, b);
  return o.inter / o.uni;
}

/// IoU minus the fraction of the enclosing box not covered by the union.
template <typename S, typename A, typename B>
S giou(const A& a, const B& b) {
  const auto o = overlap<S>(a, b);
  return o.inter / o.uni - (o.enclosing - o.uni) / o.enclosing;
}

/// Forward-mode dual number, enough arithmetic for the formulas above.
template <typename T>
struct Dual {
  T v = 0;
  T d = 0;
  Dual() = default;
  Dual(T value, T deriv = 0) : v(value), d(deriv) {}
  friend Dual operator+(const Dual& a, const Dual& b) { return {a.v + b.v, a.d + b.d}; }
  friend Dual operator-(const Dual& a, const Dual& b) { return {a.v - b.v, a.d - b.d}; }
  friend Dual operator*(const Dual& a, const Dual& b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
  friend Dual operator/(const Dual& a, const Dual& b) {
    return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)};
  }
  friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
};

}  // namespace efh::box
