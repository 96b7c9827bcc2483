//! The six point groups inside `D4`, their subgroup lattice and their actions
//! on pixel grids and on regular-representation channels.
//!
//! Elements are encoded as `g = r^rot · m^refl`, where `r` is the 90° rotation
//! (counter-clockwise) and `m` the horizontal flip, with `m r m = r⁻¹`.
//! Canonical element orderings are fixed so that channel layouts are
//! reproducible across runs and checkpoints:
//!
//! | group | elements                                  |
//! |-------|-------------------------------------------|
//! | C1    | e                                         |
//! | D1    | e, m                                      |
//! | C2    | e, r²                                     |
//! | D2    | e, r², m, r²m                             |
//! | C4    | e, r, r², r³                              |
//! | D4    | e, r, r², r³, m, rm, r²m, r³m             |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag for the element orderings above; stored in checkpoints.
pub const ELEMENT_ORDERING_TAG: &str = "rot+4*refl/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("{sub} is not a subgroup of {sup}")]
    NotASubgroup { sub: PointGroup, sup: PointGroup },
    #[error("{element} is not an element of {group}")]
    NotAMember {
        element: GroupElement,
        group: PointGroup,
    },
    #[error("kernel size {0} is even; the rotation centre is not grid aligned")]
    EvenKernel(usize),
    #[error("unknown point group `{0}`")]
    UnknownGroup(String),
    #[error("coset representatives do not chain: {0}")]
    BrokenChain(String),
}

/// An element `r^rot · m^refl` of `D4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupElement {
    pub refl: bool,
    pub rot: u8,
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement::new(false, 0);
    pub const R: GroupElement = GroupElement::new(false, 1);
    pub const M: GroupElement = GroupElement::new(true, 0);

    pub const fn new(refl: bool, rot: u8) -> Self {
        GroupElement {
            refl,
            rot: rot % 4,
        }
    }

    /// Index of this element in the canonical `D4` ordering.
    pub fn d4_index(self) -> usize {
        self.rot as usize + 4 * self.refl as usize
    }

    pub fn from_d4_index(i: usize) -> Self {
        debug_assert!(i < 8);
        GroupElement::new(i >= 4, (i % 4) as u8)
    }

    pub fn is_identity(self) -> bool {
        self == Self::IDENTITY
    }

    /// Group product `self · other`.
    pub fn product(self, other: GroupElement) -> GroupElement {
        let rot = if self.refl {
            (self.rot + 4 - other.rot) % 4
        } else {
            (self.rot + other.rot) % 4
        };
        GroupElement::new(self.refl ^ other.refl, rot)
    }

    pub fn inverse(self) -> GroupElement {
        if self.refl {
            self
        } else {
            GroupElement::new(false, (4 - self.rot) % 4)
        }
    }

    /// Acts on a point of the plane given in doubled centred coordinates
    /// (`x` to the right, `y` upwards), so half-integer centres stay integral.
    pub fn apply_to_point(self, (x, y): (i64, i64)) -> (i64, i64) {
        let (mut x, y) = (x, y);
        if self.refl {
            x = -x;
        }
        match self.rot {
            0 => (x, y),
            1 => (-y, x),
            2 => (-x, -y),
            _ => (y, -x),
        }
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rot = match self.rot {
            0 => "",
            1 => "r",
            2 => "r2",
            _ => "r3",
        };
        match (rot, self.refl) {
            ("", false) => write!(f, "e"),
            (rot, true) => write!(f, "{rot}m"),
            (rot, false) => write!(f, "{rot}"),
        }
    }
}

/// Product of two elements; see [`GroupElement::product`].
pub fn product(a: GroupElement, b: GroupElement) -> GroupElement {
    a.product(b)
}

pub fn inverse(a: GroupElement) -> GroupElement {
    a.inverse()
}

const fn el(refl: bool, rot: u8) -> GroupElement {
    GroupElement::new(refl, rot)
}

const C1_ELEMS: [GroupElement; 1] = [el(false, 0)];
const D1_ELEMS: [GroupElement; 2] = [el(false, 0), el(true, 0)];
const C2_ELEMS: [GroupElement; 2] = [el(false, 0), el(false, 2)];
const D2_ELEMS: [GroupElement; 4] = [el(false, 0), el(false, 2), el(true, 0), el(true, 2)];
const C4_ELEMS: [GroupElement; 4] = [el(false, 0), el(false, 1), el(false, 2), el(false, 3)];
const D4_ELEMS: [GroupElement; 8] = [
    el(false, 0),
    el(false, 1),
    el(false, 2),
    el(false, 3),
    el(true, 0),
    el(true, 1),
    el(true, 2),
    el(true, 3),
];

/// One of the point groups `{C1, D1, C2, D2, C4, D4}` with fixed embeddings in
/// `D4` (`D1 = ⟨m⟩`, `D2 = ⟨r², m⟩`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PointGroup {
    C1,
    D1,
    C2,
    D2,
    C4,
    D4,
}

impl PointGroup {
    pub const ALL: [PointGroup; 6] = [
        PointGroup::C1,
        PointGroup::D1,
        PointGroup::C2,
        PointGroup::D2,
        PointGroup::C4,
        PointGroup::D4,
    ];

    pub fn elements(self) -> &'static [GroupElement] {
        match self {
            PointGroup::C1 => &C1_ELEMS,
            PointGroup::D1 => &D1_ELEMS,
            PointGroup::C2 => &C2_ELEMS,
            PointGroup::D2 => &D2_ELEMS,
            PointGroup::C4 => &C4_ELEMS,
            PointGroup::D4 => &D4_ELEMS,
        }
    }

    pub fn order(self) -> usize {
        self.elements().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            PointGroup::C1 => "C1",
            PointGroup::D1 => "D1",
            PointGroup::C2 => "C2",
            PointGroup::D2 => "D2",
            PointGroup::C4 => "C4",
            PointGroup::D4 => "D4",
        }
    }

    pub fn contains(self, a: GroupElement) -> bool {
        self.index_of(a).is_some()
    }

    /// Position of `a` in the canonical ordering of this group.
    pub fn index_of(self, a: GroupElement) -> Option<usize> {
        self.elements().iter().position(|&e| e == a)
    }

    pub(crate) fn idx(self, a: GroupElement) -> usize {
        self.index_of(a)
            .unwrap_or_else(|| panic!("{a} is not an element of {self}"))
    }

    pub fn is_subgroup_of(self, sup: PointGroup) -> bool {
        is_subgroup(self, sup)
    }

    /// Proper subgroups of `self` within the six-group lattice that are not
    /// contained in another proper subgroup.
    pub fn maximal_subgroups(self) -> Vec<PointGroup> {
        let proper: Vec<PointGroup> = PointGroup::ALL
            .into_iter()
            .filter(|&h| h != self && is_subgroup(h, self))
            .collect();
        proper
            .iter()
            .copied()
            .filter(|&h| !proper.iter().any(|&k| k != h && is_subgroup(h, k)))
            .collect()
    }
}

impl fmt::Display for PointGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PointGroup {
    type Err = GroupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PointGroup::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| GroupError::UnknownGroup(s.to_string()))
    }
}

pub fn is_subgroup(h: PointGroup, g: PointGroup) -> bool {
    h.elements().iter().all(|&a| g.contains(a))
}

/// A system of representatives `R` of the left quotient `sub \ sup`, so that
/// `sup` is the disjoint union of the cosets `sub · r`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CosetReps {
    pub sub: PointGroup,
    pub sup: PointGroup,
    pub reps: Vec<GroupElement>,
}

impl CosetReps {
    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    /// Trivial quotient `g \ g`.
    pub fn trivial(g: PointGroup) -> Self {
        CosetReps {
            sub: g,
            sup: g,
            reps: vec![GroupElement::IDENTITY],
        }
    }

    /// Checks the defining properties: identity first and the map
    /// `sub × reps → sup, (h, t) ↦ h·t` is a bijection.
    pub fn validate(&self) -> Result<(), GroupError> {
        if self.reps.first() != Some(&GroupElement::IDENTITY) {
            return Err(GroupError::BrokenChain("identity must come first".into()));
        }
        if self.reps.len() * self.sub.order() != self.sup.order() {
            return Err(GroupError::BrokenChain("wrong number of cosets".into()));
        }
        let mut seen = [false; 8];
        for &t in &self.reps {
            for &h in self.sub.elements() {
                let g = h.product(t);
                if !self.sup.contains(g) || std::mem::replace(&mut seen[g.d4_index()], true) {
                    return Err(GroupError::BrokenChain(format!(
                        "cosets of {} by {:?} do not partition {}",
                        self.sub, self.reps, self.sup
                    )));
                }
            }
        }
        Ok(())
    }

    /// Decomposes `g = h·t` with `h ∈ sub`, `t ∈ reps`; returns `(h, index of t)`.
    pub fn decompose(&self, g: GroupElement) -> (GroupElement, usize) {
        for (i, &t) in self.reps.iter().enumerate() {
            let h = g.product(t.inverse());
            if self.sub.contains(h) {
                return (h, i);
            }
        }
        panic!("{g} not covered by cosets of {} in {}", self.sub, self.sup)
    }
}

/// Canonical representatives: the lowest canonical index of each coset, in
/// ascending order (hence identity first).
pub fn coset_representatives(h: PointGroup, g: PointGroup) -> Result<CosetReps, GroupError> {
    if !is_subgroup(h, g) {
        return Err(GroupError::NotASubgroup { sub: h, sup: g });
    }
    let mut covered = [false; 8];
    let mut reps = Vec::with_capacity(g.order() / h.order());
    for &x in g.elements() {
        if covered[x.d4_index()] {
            continue;
        }
        reps.push(x);
        for &y in h.elements() {
            covered[y.product(x).d4_index()] = true;
        }
    }
    Ok(CosetReps { sub: h, sup: g, reps })
}

/// Representatives of `C \ A` obtained by relaxing `A → B` with `outer` and
/// then `B → C` with `inner`.
///
/// The list is `[r'·r for r in outer for r' in inner]`, which is the order in
/// which two successive relaxations lay out their channels. This is the
/// representative system a direct `A → C` relaxation must use to reproduce a
/// two-step relaxation bit-for-bit.
pub fn compose_representatives(
    inner: &CosetReps,
    outer: &CosetReps,
) -> Result<CosetReps, GroupError> {
    if inner.sup != outer.sub {
        return Err(GroupError::BrokenChain(format!(
            "inner quotient is over {}, outer is under {}",
            inner.sup, outer.sub
        )));
    }
    let reps = outer
        .reps
        .iter()
        .flat_map(|&r| inner.reps.iter().map(move |&rp| rp.product(r)))
        .collect();
    let composed = CosetReps {
        sub: inner.sub,
        sup: outer.sup,
        reps,
    };
    composed.validate()?;
    Ok(composed)
}

/// Permutation of an `n × n` grid realising `(a·f)(p) = f(a⁻¹·p)`: entry `q`
/// is the row-major source index read by output position `q`.
///
/// Works for any `n`; for even `n` the rotation centre sits between pixels.
pub fn grid_permutation(a: GroupElement, n: usize) -> Vec<usize> {
    let inv = a.inverse();
    let span = n as i64 - 1;
    let mut perm = Vec::with_capacity(n * n);
    for i in 0..n as i64 {
        for j in 0..n as i64 {
            let (x, y) = inv.apply_to_point((2 * j - span, span - 2 * i));
            let (si, sj) = ((span - y) / 2, (x + span) / 2);
            perm.push((si * n as i64 + sj) as usize);
        }
    }
    perm
}

/// Kernel-grid permutation for odd kernel size `k`; see [`grid_permutation`].
pub fn act_on_grid(a: GroupElement, k: usize) -> Result<Vec<usize>, GroupError> {
    if k.is_multiple_of(2) {
        return Err(GroupError::EvenKernel(k));
    }
    Ok(grid_permutation(a, k))
}

/// Left-regular action of `a` on the channels of `g`: `π(idx(s)) = idx(a·s)`.
pub fn regular_perm(a: GroupElement, g: PointGroup) -> Result<Vec<usize>, GroupError> {
    if !g.contains(a) {
        return Err(GroupError::NotAMember {
            element: a,
            group: g,
        });
    }
    Ok(g.elements().iter().map(|&s| g.idx(a.product(s))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent model of D4 as 2×2 signed permutation matrices.
    fn matrix(a: GroupElement) -> [[i64; 2]; 2] {
        let r = [[0, -1], [1, 0]];
        let m = [[-1, 0], [0, 1]];
        let mut acc = [[1, 0], [0, 1]];
        for _ in 0..a.rot {
            acc = mul(acc, r);
        }
        if a.refl {
            acc = mul(acc, m);
        }
        acc
    }

    fn mul(a: [[i64; 2]; 2], b: [[i64; 2]; 2]) -> [[i64; 2]; 2] {
        let mut c = [[0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        c
    }

    fn cayley_oracle(a: GroupElement, b: GroupElement) -> GroupElement {
        let target = mul(matrix(a), matrix(b));
        *D4_ELEMS.iter().find(|&&g| matrix(g) == target).unwrap()
    }

    #[test]
    fn product_examples() {
        assert_eq!(product(el(false, 1), el(false, 1)), el(false, 2));
        assert_eq!(product(el(true, 0), el(true, 0)), GroupElement::IDENTITY);
        assert_ne!(product(el(false, 1), el(true, 0)), product(el(true, 0), el(false, 1)));
    }

    #[test]
    fn product_matches_matrix_cayley_table() {
        for &a in &D4_ELEMS {
            for &b in &D4_ELEMS {
                assert_eq!(product(a, b), cayley_oracle(a, b), "{a}·{b}");
            }
        }
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(inverse(el(false, 1)), el(false, 3));
        assert_eq!(inverse(GroupElement::IDENTITY), GroupElement::IDENTITY);
        for j in 0..4 {
            let a = el(true, j);
            assert_eq!(inverse(a), a);
            assert_eq!(cayley_oracle(a, a), GroupElement::IDENTITY);
        }
    }

    #[test]
    fn group_axioms_hold_for_all_six_groups() {
        for g in PointGroup::ALL {
            let els = g.elements();
            assert_eq!(els[0], GroupElement::IDENTITY);
            for &a in els {
                assert!(g.contains(a.inverse()));
                assert!(a.product(a.inverse()).is_identity());
                for &b in els {
                    assert!(g.contains(a.product(b)), "{g} not closed");
                    for &c in els {
                        assert_eq!(a.product(b).product(c), a.product(b.product(c)));
                    }
                }
            }
        }
        let orders: Vec<usize> = [
            PointGroup::C1,
            PointGroup::C2,
            PointGroup::C4,
            PointGroup::D1,
            PointGroup::D2,
            PointGroup::D4,
        ]
        .iter()
        .map(|g| g.order())
        .collect();
        assert_eq!(orders, vec![1, 2, 4, 2, 4, 8]);
    }

    #[test]
    fn subgroup_lattice_matches_element_containment() {
        use std::collections::BTreeSet;
        assert!(is_subgroup(PointGroup::C2, PointGroup::C4));
        assert!(!is_subgroup(PointGroup::C4, PointGroup::D2));
        for h in PointGroup::ALL {
            for g in PointGroup::ALL {
                let hs: BTreeSet<_> = h.elements().iter().collect();
                let gs: BTreeSet<_> = g.elements().iter().collect();
                assert_eq!(is_subgroup(h, g), hs.is_subset(&gs), "{h} ≤ {g}");
            }
        }
    }

    #[test]
    fn coset_examples() {
        let reps = |h, g| coset_representatives(h, g).unwrap().reps;
        assert_eq!(reps(PointGroup::C2, PointGroup::C4), vec![el(false, 0), el(false, 1)]);
        assert_eq!(reps(PointGroup::C4, PointGroup::D4), vec![el(false, 0), el(true, 0)]);
        assert_eq!(reps(PointGroup::C1, PointGroup::D4), D4_ELEMS.to_vec());
        assert_eq!(
            coset_representatives(PointGroup::C4, PointGroup::D2),
            Err(GroupError::NotASubgroup {
                sub: PointGroup::C4,
                sup: PointGroup::D2
            })
        );
    }

    #[test]
    fn cosets_partition_for_every_pair() {
        for h in PointGroup::ALL {
            for g in PointGroup::ALL {
                if let Ok(r) = coset_representatives(h, g) {
                    r.validate().unwrap();
                    assert_eq!(r.len(), g.order() / h.order());
                    for &x in g.elements() {
                        let (hh, i) = r.decompose(x);
                        assert_eq!(hh.product(r.reps[i]), x);
                    }
                }
            }
        }
    }

    #[test]
    fn composed_representatives_are_valid_along_every_chain() {
        for c in PointGroup::ALL {
            for b in PointGroup::ALL {
                for a in PointGroup::ALL {
                    if !(is_subgroup(c, b) && is_subgroup(b, a)) {
                        continue;
                    }
                    let inner = coset_representatives(c, b).unwrap();
                    let outer = coset_representatives(b, a).unwrap();
                    let comp = compose_representatives(&inner, &outer).unwrap();
                    assert_eq!(comp.sub, c);
                    assert_eq!(comp.sup, a);
                    assert_eq!(comp.len() * c.order(), a.order());
                }
            }
        }
        let same = compose_representatives(
            &coset_representatives(PointGroup::C1, PointGroup::D1).unwrap(),
            &coset_representatives(PointGroup::D1, PointGroup::D2).unwrap(),
        )
        .unwrap();
        assert_eq!(same.reps, vec![el(false, 0), el(true, 0), el(false, 2), el(true, 2)]);
    }

    #[test]
    fn grid_rotation_example() {
        let img = [1, 2, 3, 4, 5, 6, 7, 8, 9];
        let perm = act_on_grid(GroupElement::R, 3).unwrap();
        let rotated: Vec<i32> = perm.iter().map(|&p| img[p]).collect();
        assert_eq!(rotated, vec![3, 6, 9, 2, 5, 8, 1, 4, 7]);
        let flip = act_on_grid(GroupElement::M, 3).unwrap();
        let flipped: Vec<i32> = flip.iter().map(|&p| img[p]).collect();
        assert_eq!(flipped, vec![3, 2, 1, 6, 5, 4, 9, 8, 7]);
        assert_eq!(act_on_grid(GroupElement::IDENTITY, 3).unwrap(), (0..9).collect::<Vec<_>>());
        assert_eq!(act_on_grid(GroupElement::R, 4), Err(GroupError::EvenKernel(4)));
    }

    #[test]
    fn grid_action_is_a_homomorphism() {
        for n in [1, 2, 3, 5, 6] {
            for &a in &D4_ELEMS {
                for &b in &D4_ELEMS {
                    let pa = grid_permutation(a, n);
                    let pb = grid_permutation(b, n);
                    let pab = grid_permutation(a.product(b), n);
                    // (a·(b·f))(q) = (b·f)(pa[q]) = f(pb[pa[q]])
                    let composed: Vec<usize> = pa.iter().map(|&q| pb[q]).collect();
                    assert_eq!(composed, pab);
                }
            }
            let r4 = (0..4).fold((0..n * n).collect::<Vec<_>>(), |acc, _| {
                let p = grid_permutation(GroupElement::R, n);
                p.iter().map(|&q| acc[q]).collect()
            });
            assert_eq!(r4, (0..n * n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn regular_perm_examples() {
        assert_eq!(regular_perm(GroupElement::R, PointGroup::C4).unwrap(), vec![1, 2, 3, 0]);
        assert_eq!(
            regular_perm(GroupElement::IDENTITY, PointGroup::D4).unwrap(),
            (0..8).collect::<Vec<_>>()
        );
        let pm = regular_perm(GroupElement::M, PointGroup::D4).unwrap();
        let squared: Vec<usize> = (0..8).map(|i| pm[pm[i]]).collect();
        assert_eq!(squared, (0..8).collect::<Vec<_>>());
        assert!(regular_perm(GroupElement::R, PointGroup::D2).is_err());
    }

    #[test]
    fn regular_perm_is_a_homomorphism() {
        for g in PointGroup::ALL {
            for &a in g.elements() {
                for &b in g.elements() {
                    let pa = regular_perm(a, g).unwrap();
                    let pb = regular_perm(b, g).unwrap();
                    let pab = regular_perm(a.product(b), g).unwrap();
                    let composed: Vec<usize> = (0..g.order()).map(|i| pa[pb[i]]).collect();
                    assert_eq!(composed, pab);
                }
            }
        }
    }

    #[test]
    fn maximal_subgroups() {
        assert_eq!(PointGroup::D4.maximal_subgroups(), vec![PointGroup::D2, PointGroup::C4]);
        assert_eq!(PointGroup::D2.maximal_subgroups(), vec![PointGroup::D1, PointGroup::C2]);
        assert_eq!(PointGroup::C4.maximal_subgroups(), vec![PointGroup::C2]);
        assert_eq!(PointGroup::C2.maximal_subgroups(), vec![PointGroup::C1]);
        assert!(PointGroup::C1.maximal_subgroups().is_empty());
    }

    #[test]
    fn parse_names() {
        assert_eq!("d4".parse::<PointGroup>().unwrap(), PointGroup::D4);
        assert!("C3".parse::<PointGroup>().is_err());
    }
}
