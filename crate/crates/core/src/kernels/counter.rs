/// Instrumentation hook for kernel arithmetic.
///
/// Kernels are generic over the counter; [`NoCount`] compiles to nothing.
pub trait OpCounter {
    /// One addition or subtraction of an input into an accumulator.
    fn accumulate(&mut self, n: u64);
    /// One multiplication by a group scale, outside the accumulation loop.
    fn scale_multiply(&mut self, n: u64);
    /// One multiplication inside an accumulation loop.
    fn inner_multiply(&mut self, n: u64);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoCount;

impl OpCounter for NoCount {
    #[inline(always)]
    fn accumulate(&mut self, _: u64) {}
    #[inline(always)]
    fn scale_multiply(&mut self, _: u64) {}
    #[inline(always)]
    fn inner_multiply(&mut self, _: u64) {}
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub accumulate: u64,
    pub scale_multiply: u64,
    pub inner_multiply: u64,
}

impl OpCounts {
    pub fn multiply_ops(&self) -> u64 {
        self.scale_multiply + self.inner_multiply
    }
}

impl OpCounter for OpCounts {
    fn accumulate(&mut self, n: u64) {
        self.accumulate += n;
    }
    fn scale_multiply(&mut self, n: u64) {
        self.scale_multiply += n;
    }
    fn inner_multiply(&mut self, n: u64) {
        self.inner_multiply += n;
    }
}
