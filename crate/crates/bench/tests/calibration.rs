//! Checks the analytic working-set estimate against the peak heap usage of
//! a real forward and backward pass.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use paiconv_bench::{random_cloud, working_set_bytes};
use paiconv_core::{ClassifierConfig, ClassifierState, Pooling, Rng, Variant};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn measured_peak(config: &ClassifierConfig, n: usize) -> usize {
    let cloud = random_cloud(n, &mut Rng::new(1)).unwrap();
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let state = ClassifierState::build(config.clone(), 0).unwrap();
    let (loss, _, grads) = state
        .loss_and_grad(&cloud, 0, &mut Rng::new(2), true)
        .unwrap();
    assert!(loss.is_finite());
    drop(grads);
    drop(state);
    PEAK.load(Ordering::SeqCst) - base
}

#[test]
fn estimate_is_within_twice_the_measured_peak() {
    let config = ClassifierConfig {
        conv_channels: vec![16, 16, 32],
        position_width: 8,
        aggregate_width: 64,
        fc_widths: vec![32, 3],
        k: 16,
        kernel_len: 16,
        dropout: 0.5,
        downsample_ratios: Vec::new(),
        pooling: Pooling::Max,
        variant: Variant::Full,
        input_features: 0,
    };
    for n in [256, 1024] {
        let measured = measured_peak(&config, n) as f64;
        let estimate = working_set_bytes(&config, n) as f64;
        let ratio = estimate / measured;
        println!("n={n} measured={measured} estimate={estimate} ratio={ratio:.3}");
        assert!((0.5..=2.0).contains(&ratio), "ratio {ratio}");
    }
}
