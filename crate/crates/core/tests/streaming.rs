//! Streamed access must not hold a full copy of the matrix in memory.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use sceneret::store::{synth_generate, write_dataset, AccessMode, Dataset, SynthParams};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size > layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::SeqCst) + new_size
                    - layout.size();
                PEAK.fetch_max(now, Ordering::SeqCst);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::SeqCst);
            }
        }
        p
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

/// Peak bytes allocated above the level at entry while `f` runs.
fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = f();
    (out, PEAK.load(Ordering::SeqCst) - base)
}

// Single test in this binary so no other test perturbs the counters.
#[test]
fn streamed_reads_stay_below_one_copy() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("big");
    {
        let recs = synth_generate(&SynthParams {
            n_scenes: 300,
            views_per_scene: 20,
            dim: 1024,
            sigma: 0.5,
            nuisance_dims: 512,
            seed: 2,
        })
        .unwrap();
        write_dataset(&recs, &dir).unwrap();
    }
    let matrix_bytes = 300 * 20 * 1024 * 4;
    assert_eq!(
        std::fs::metadata(dir.join("embeddings.bin")).unwrap().len(),
        matrix_bytes as u64
    );

    let (sum, streamed_peak) = peak_during(|| {
        let ds = Dataset::open(&dir, AccessMode::Streamed).unwrap();
        let mut sum = 0.0f64;
        ds.for_each_record(|_, _, _, row| {
            sum += row
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>();
            Ok(())
        })
        .unwrap();
        for i in (0..ds.len()).step_by(997) {
            let v = ds.vector(i).unwrap();
            assert_eq!(v.len(), 1024);
        }
        assert!(ds.vector_by_key("scene-0299", "view-019").is_ok());
        sum
    });
    assert!(
        (sum - 6000.0).abs() < 1e-2,
        "rows should be unit norm, total {sum}"
    );
    assert!(
        streamed_peak < matrix_bytes,
        "streamed peak {streamed_peak} B is not below one copy ({matrix_bytes} B)"
    );

    let (_, eager_peak) = peak_during(|| Dataset::open(&dir, AccessMode::Eager).unwrap().len());
    assert!(
        eager_peak >= matrix_bytes,
        "eager load should hold the matrix, peak {eager_peak}"
    );
    println!("streamed peak {streamed_peak} B, eager peak {eager_peak} B, matrix {matrix_bytes} B");
}
