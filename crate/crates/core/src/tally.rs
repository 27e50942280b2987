//! Operation counters for cost-model checks.
//!
//! Hot paths take a `&mut impl Tally`. Passing `&mut ()` compiles the counting
//! away; passing an [`OpCounter`] records multiplies and node visits.

pub trait Tally {
    fn mul(&mut self, n: u64);
    fn visit(&mut self, n: u64);
}

impl Tally for () {
    #[inline(always)]
    fn mul(&mut self, _n: u64) {}
    #[inline(always)]
    fn visit(&mut self, _n: u64) {}
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounter {
    pub muls: u64,
    pub visits: u64,
}

impl Tally for OpCounter {
    #[inline]
    fn mul(&mut self, n: u64) {
        self.muls += n;
    }
    #[inline]
    fn visit(&mut self, n: u64) {
        self.visits += n;
    }
}
