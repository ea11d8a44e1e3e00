use fipac_core::artifact::ArtifactFiles;
use fipac_core::corpus::{self, CorpusProgram};
use fipac_core::instrument::{CheckPolicy, Mode};
use fipac_core::pac::{PacConfig, PacKey};
use fipac_core::postprocess::{build, BuildConfig};
use fipac_core::sim::{first_state_mismatch, run_build, ExecConfig, Verdict};
use proptest::prelude::*;

fn program() -> impl Strategy<Value = &'static CorpusProgram> {
    (0..corpus::PROGRAMS.len()).prop_map(|i| &corpus::PROGRAMS[i])
}

fn policy() -> impl Strategy<Value = CheckPolicy> {
    prop::sample::select(CheckPolicy::ALL.to_vec())
}

fn mode() -> impl Strategy<Value = Mode> {
    prop::sample::select(vec![Mode::Fipac, Mode::XorBaseline])
}

fn input_for(c: &CorpusProgram, picks: &[u64]) -> Vec<u64> {
    c.input_domain.iter().zip(picks).map(|(&(lo, hi), p)| lo + p % (hi - lo + 1)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn instrumentation_preserves_outputs(
        c in program(), mode in mode(), policy in policy(),
        k0: u64, k1: u64, seed: u64, bits in 4u32..=32, picks in prop::collection::vec(any::<u64>(), 6),
    ) {
        let p = c.program();
        let input = input_for(c, &picks);
        let key = PacKey::new(k0, k1);
        let plain = build(&p, BuildConfig::new(Mode::None, policy, key)).unwrap();
        let cfg = BuildConfig::new(mode, policy, key).with_seed(seed).with_pac(PacConfig::with_pac_bits(bits).unwrap());
        let b = build(&p, cfg).unwrap();
        let want = run_build(&plain, &input, &[], &ExecConfig::default());
        let got = run_build(&b, &input, &[], &ExecConfig::traced());
        prop_assert_eq!(&want.verdict, &Verdict::Completed);
        prop_assert_eq!(&got.verdict, &Verdict::Completed);
        prop_assert_eq!(&got.outputs, &want.outputs);
        prop_assert_eq!(first_state_mismatch(&b.states, &got), None);
    }

    #[test]
    fn rekey_matches_a_fresh_build(c in program(), mode in mode(), policy in policy(), k0: u64, k1: u64, seed: u64) {
        let p = c.program();
        let base = build(&p, BuildConfig::new(mode, policy, PacKey::new(1, 2)).with_seed(3)).unwrap();
        let key = PacKey::new(k0, k1);
        let fresh = build(&p, BuildConfig::new(mode, policy, key).with_seed(seed)).unwrap();
        let rekeyed = base.rekey(key, seed).unwrap();
        prop_assert_eq!(ArtifactFiles::from_build(&rekeyed), ArtifactFiles::from_build(&fresh));
    }

    #[test]
    fn key_only_changes_constants(c in program(), policy in policy(), k0: u64, k1: u64) {
        let p = c.program();
        let a = build(&p, BuildConfig::new(Mode::Fipac, policy, PacKey::new(1, 2))).unwrap();
        let b = build(&p, BuildConfig::new(Mode::Fipac, policy, PacKey::new(k0, k1))).unwrap();
        prop_assert_eq!(&a.instrumented, &b.instrumented);
        prop_assert_eq!(&a.manifest, &b.manifest);
        let addrs = |x: &fipac_core::postprocess::Build| x.program.instructions().map(|i| (i.address, i.op.mnemonic())).collect::<Vec<_>>();
        prop_assert_eq!(addrs(&a), addrs(&b));
    }
}
