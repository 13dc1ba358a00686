//! Survey, auxiliary functions, cascade counts and homology in one pass.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::auxiliary::{choose_h, AuxiliaryMorse, HCriticalPoint};
use super::cascade::{CascadeContext, CascadeCount, CascadeParams};
use super::chain::{boundary_matrices, homology, verify_chain, CascadeChainComplex, GeneratorRecord};
use super::survey::{survey_critical, Survey, SurveyOptions};
use super::MorseBottError;
use crate::objective::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomologyOptions {
    pub survey: SurveyOptions,
    pub cascade: CascadeParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct HomologyReport<P> {
    pub survey: Survey<P>,
    pub morse: Vec<AuxiliaryMorse<P>>,
    pub counts: Vec<CascadeCount>,
    pub complex: CascadeChainComplex,
    pub verified: bool,
    pub betti: Option<Vec<usize>>,
}

impl<P> HomologyReport<P> {
    /// Generators in the order used by the complex.
    pub fn generators(&self) -> Vec<&HCriticalPoint<P>> {
        self.morse.iter().flat_map(|m| m.points.iter()).collect()
    }
}

/// Runs the whole cascade pipeline. Components failing the Morse-Bott test
/// are dropped and the complex is marked partial; an unresolved pair count
/// aborts with [`MorseBottError::Unresolved`].
pub fn cascade_homology<O: Objective + ?Sized>(obj: &O, opts: &HomologyOptions, rng: &mut dyn RngCore) -> Result<HomologyReport<O::Point>, MorseBottError> {
    let survey = survey_critical(obj, &opts.survey, &opts.cascade.controller, rng);
    homology_from_survey(obj, survey, opts, rng)
}

/// Same pipeline with separate random streams for the survey and for the
/// choice of auxiliary functions.
pub fn cascade_homology_with<O: Objective + ?Sized>(
    obj: &O,
    opts: &HomologyOptions,
    survey_rng: &mut dyn RngCore,
    h_rng: &mut dyn RngCore,
) -> Result<HomologyReport<O::Point>, MorseBottError> {
    let survey = survey_critical(obj, &opts.survey, &opts.cascade.controller, survey_rng);
    homology_from_survey(obj, survey, opts, h_rng)
}

/// Continues the pipeline from an existing survey.
pub fn homology_from_survey<O: Objective + ?Sized>(
    obj: &O,
    survey: Survey<O::Point>,
    opts: &HomologyOptions,
    h_rng: &mut dyn RngCore,
) -> Result<HomologyReport<O::Point>, MorseBottError> {
    let excluded: Vec<usize> = survey.manifolds.iter().filter(|m| !m.morse_bott.passed).map(|m| m.id).collect();
    let passing: Vec<_> = survey.passing().collect();
    let seeds: Vec<u64> = passing.iter().map(|_| h_rng.random()).collect();
    let morse: Vec<AuxiliaryMorse<O::Point>> = passing
        .par_iter()
        .zip(seeds)
        .map(|(c, seed)| choose_h(obj, c, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect::<Result<_, _>>()?;

    let ctx = CascadeContext { obj, manifolds: &survey.manifolds, morse: &morse, params: opts.cascade };
    let gens: Vec<&HCriticalPoint<O::Point>> = morse.iter().flat_map(|m| m.points.iter()).collect();
    let energy_of = |id: usize| survey.manifolds.iter().find(|m| m.id == id).map_or(f64::NAN, |m| m.energy);
    let records: Vec<GeneratorRecord> = gens.iter().enumerate().map(|(i, g)| GeneratorRecord::new(i, energy_of(g.manifold), g)).collect();
    let pairs: Vec<(usize, usize)> = (0..gens.len())
        .flat_map(|i| (0..gens.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| gens[i].Ind() == gens[j].Ind() + 1)
        .collect();
    let counts: Vec<CascadeCount> = pairs
        .par_iter()
        .map(|&(i, j)| ctx.enumerate_cascades(gens[i], gens[j], (i, j)))
        .collect::<Result<_, _>>()?;

    let mut complex = boundary_matrices(records, &counts);
    complex.partial = !excluded.is_empty();
    complex.excluded_manifolds = excluded;
    let verified = verify_chain(&complex);
    let betti = homology(&complex).ok();
    Ok(HomologyReport { survey, morse, counts, complex, verified, betti })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchlib::{sphere_z2, torus_product_example};
    use crate::group::Group;
    use crate::surface::OrientedCellComplex;
    use crate::ym::{EnergyBackend, Lattice, YangMills};

    fn run<O: Objective>(obj: &O, seed: u64) -> HomologyReport<O::Point> {
        let opts = HomologyOptions { survey: SurveyOptions { n_starts: 24, ..Default::default() }, ..Default::default() };
        cascade_homology(obj, &opts, &mut ChaCha8Rng::seed_from_u64(seed)).expect("pipeline resolves")
    }

    #[test]
    fn sphere_homology() {
        let r = run(&sphere_z2(), 11);
        let inds: Vec<usize> = r.complex.generators.iter().map(|g| g.ind).collect();
        assert_eq!(inds, vec![0, 1, 2, 2]);
        assert!(r.verified);
        assert_eq!(r.betti, Some(vec![1, 0, 1]));
        assert!(!r.complex.partial);
    }

    #[test]
    fn torus_homology() {
        let r = run(&torus_product_example(), 12);
        assert!(r.verified);
        assert_eq!(r.betti, Some(vec![1, 2, 1]), "{:?}", r.counts);
    }

    #[test]
    fn u1_grid_homology() {
        let lattice = Lattice::new(OrientedCellComplex::torus_grid(2, 1).unwrap(), Group::U1).unwrap();
        let r = run(&YangMills::new(lattice, EnergyBackend::Wilson), 13);
        assert!(r.verified);
        assert_eq!(r.betti, Some(vec![1, 3, 3, 1]), "{:?}", r.counts);
    }

    #[test]
    fn sphere_north_to_minimum_is_a_circle_family() {
        let obj = sphere_z2();
        let r = run(&obj, 14);
        let ctx = CascadeContext { obj: &obj, manifolds: &r.survey.manifolds, morse: &r.morse, params: CascadeParams::default() };
        let gens = r.generators();
        let north = gens.iter().find(|g| g.Ind() == 2 && obj.fingerprint(&g.point).unwrap()[1] > 0.0).unwrap();
        let hmin = gens.iter().find(|g| g.Ind() == 0).unwrap();
        let scan = ctx.scan_circle(north, hmin, 32).expect("circle plan");
        let certified = scan.iter().filter(|(_, p)| p.approach < 1e-4).count();
        // all directions except the one landing on the h-maximum
        assert!(certified >= 30, "{certified}");
    }

    #[test]
    fn su2_genus_one_is_partial() {
        let lattice = Lattice::new(OrientedCellComplex::minimal_genus(1).unwrap(), Group::Su2).unwrap();
        let r = run(&YangMills::new(lattice, EnergyBackend::Wilson), 15);
        assert!(r.complex.partial);
        assert!(r.verified);
        assert_eq!(r.betti.as_deref().map(|b| b[3..].to_vec()), Some(vec![1, 1, 1, 1]), "{:?}", r.counts);
    }
}
