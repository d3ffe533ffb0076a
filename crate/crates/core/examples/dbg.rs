use nilharm::field::*;
use nilharm::group::*;
use nilharm::lp::*;
fn main() {
    let dims = GroupDims::new(0, 0, 1);
    for cl in [9usize, 13, 17] {
        let lf = Field::from_fn(
            DomainTag::LiftGroup,
            dims,
            GridSpec::new(vec![AxisSpec::symmetric(2.5, cl); 5]).unwrap(),
            |c| (-(c.iter().map(|x| x * x).sum::<f64>())).exp(),
        );
        let h3 = factor_bump_field(&dims, Factor::H3, 0.9, 9).unwrap();
        let rep = subgroup_associativity_check(&lf, Factor::H3, &h3, &h3, 0.05).unwrap();
        let rep2 = subgroup_commutativity_check(&lf, Factor::H1,
            &factor_bump_field(&dims, Factor::H1, 0.9, 9).unwrap(), Factor::H3, &h3, 0.02).unwrap();
        println!("lf={cl}: assoc rel {:.4}, comm rel {:.2e}", rep.rel_linf, rep2.rel_linf);
    }
}
