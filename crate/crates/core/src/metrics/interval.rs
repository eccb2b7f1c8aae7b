use std::fmt::Display;

use num_traits::Num;

use super::MetricsError;

/// Closed-open time span `[start, end)` over any ordered numeric type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Span<T> {
    pub start: T,
    pub end: T,
}

impl<T: Copy + PartialOrd + Num> Span<T> {
    pub fn new(start: T, end: T) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> T {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Sorted, pairwise-disjoint cover of the union of `spans`. Touching spans
/// coalesce.
pub fn merge_intervals<T>(spans: &[Span<T>]) -> Result<Vec<Span<T>>, MetricsError>
where
    T: Copy + PartialOrd + Num + Display,
{
    if let Some(bad) = spans.iter().find(|s| s.end < s.start) {
        return Err(MetricsError::InvalidInterval { start: bad.start.to_string(), end: bad.end.to_string() });
    }
    let mut sorted = spans.to_vec();
    sorted.sort_by(|a, b| a.start.partial_cmp(&b.start).expect("interval bounds are comparable"));
    let mut merged: Vec<Span<T>> = Vec::with_capacity(sorted.len());
    for span in sorted {
        match merged.last_mut() {
            Some(last) if span.start <= last.end => {
                if span.end > last.end {
                    last.end = span.end;
                }
            }
            _ => merged.push(span),
        }
    }
    Ok(merged)
}

/// Length of the union of `spans`.
pub fn union_length<T>(spans: &[Span<T>]) -> Result<T, MetricsError>
where
    T: Copy + PartialOrd + Num + Display,
{
    Ok(merge_intervals(spans)?.iter().fold(T::zero(), |acc, s| acc + s.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(v: &[(u64, u64)]) -> Vec<Span<u64>> {
        v.iter().map(|&(s, e)| Span::new(s, e)).collect()
    }

    #[test]
    fn empty_input() {
        assert!(merge_intervals::<u64>(&[]).unwrap().is_empty());
    }

    #[test]
    fn overlapping_and_disjoint() {
        let m = merge_intervals(&spans(&[(0, 10), (5, 15), (20, 25)])).unwrap();
        assert_eq!(m, spans(&[(0, 15), (20, 25)]));
        assert_eq!(union_length(&spans(&[(0, 10), (5, 15), (20, 25)])).unwrap(), 20);
    }

    #[test]
    fn unsorted_nested_and_touching() {
        let m = merge_intervals(&spans(&[(30, 40), (0, 100), (100, 110), (200, 200)])).unwrap();
        assert_eq!(m, spans(&[(0, 110), (200, 200)]));
    }

    #[test]
    fn reversed_interval_rejected() {
        assert!(matches!(merge_intervals(&spans(&[(5, 4)])), Err(MetricsError::InvalidInterval { .. })));
    }

    #[test]
    fn works_over_floats() {
        let m = merge_intervals(&[Span::new(0.5f64, 1.5), Span::new(1.0, 2.0)]).unwrap();
        assert_eq!(m, vec![Span::new(0.5, 2.0)]);
    }
}
