pub mod bound_check;
pub mod grad_check;
pub mod mem_report;
pub mod perf_bench;
pub mod trace_bench;
pub mod train;
