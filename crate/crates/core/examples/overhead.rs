//! Per-policy static and dynamic overhead of every corpus program, as CSV.

use fipac_core::corpus;
use fipac_core::experiments::measure_overhead;
use fipac_core::instrument::{CheckPolicy, Mode};
use fipac_core::pac::PacKey;

fn main() {
    let key = PacKey::new(0x0123_4567_89AB_CDEF, 0x89AB_CDEF_0123_4567);
    println!("program,mode,policy,static_original,static_instrumented,static_overhead,dynamic_original,dynamic_instrumented,dynamic_overhead");
    for c in corpus::PROGRAMS {
        for mode in [Mode::Fipac, Mode::XorBaseline] {
            for policy in CheckPolicy::ALL {
                let o = measure_overhead(&c.program(), &c.inputs, mode, policy, key, 0).expect("corpus builds");
                println!(
                    "{},{mode},{policy},{},{},{:.4},{},{},{:.4}",
                    c.name,
                    o.static_original,
                    o.static_instrumented,
                    o.static_overhead(),
                    o.dynamic_original,
                    o.dynamic_instrumented,
                    o.dynamic_overhead()
                );
            }
        }
    }
}
