//! Endpoint authentication, segment assignment, and the group
//! connectivity matrix.
//!
//! Authentication is a token-equality stub standing in for the RADIUS
//! exchanges of a real deployment. Rule distribution is modeled as
//! destination-filtered rule downloads: an edge only ever receives the
//! rules whose destination group is attached to it, and it receives the
//! full filtered set each time.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{
    AuthOutcome, AuthReply, AuthResult, AuthToken, ConnectivityRule, ControlMessage, EndpointId,
    GroupId, Outbound, RuleAction, UnderlayAddr, Vn,
};

/// The full set of group rules plus the default for unspecified pairs.
/// Missing (src, dst) pairs are treated as unspecified-and-denied unless
/// the scenario flips the default.
#[derive(Debug, Clone)]
pub struct ConnectivityMatrix {
    rules: BTreeMap<(Vn, GroupId, GroupId), RuleAction>,
    pub default_action: RuleAction,
    version: u64,
}

impl ConnectivityMatrix {
    pub fn new(default_action: RuleAction) -> Self {
        Self { rules: BTreeMap::new(), default_action, version: 0 }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn action(&self, vn: Vn, src: GroupId, dst: GroupId) -> RuleAction {
        self.rules.get(&(vn, src, dst)).copied().unwrap_or(self.default_action)
    }

    pub fn rules(&self) -> impl Iterator<Item = ConnectivityRule> + '_ {
        self.rules.iter().map(|((vn, src, dst), action)| ConnectivityRule {
            vn: *vn,
            src_group: *src,
            dst_group: *dst,
            action: *action,
        })
    }
}

/// A single well-formed change to the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixChange {
    /// Add a rule or flip the action of an existing one.
    Upsert(ConnectivityRule),
    Remove { vn: Vn, src_group: GroupId, dst_group: GroupId },
}

#[derive(Debug, Clone)]
struct EndpointPolicy {
    token: AuthToken,
    vn: Vn,
    group: GroupId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReassignError {
    UnknownEndpoint,
}

pub struct PolicyServer {
    endpoints: BTreeMap<EndpointId, EndpointPolicy>,
    matrix: ConnectivityMatrix,
    /// Where each authenticated endpoint currently sits, learned from
    /// session starts and cleared by session stops.
    attachments: BTreeMap<EndpointId, UnderlayAddr>,
}

impl PolicyServer {
    pub fn new(default_action: RuleAction) -> Self {
        Self {
            endpoints: BTreeMap::new(),
            matrix: ConnectivityMatrix::new(default_action),
            attachments: BTreeMap::new(),
        }
    }

    pub fn add_endpoint(&mut self, id: EndpointId, token: AuthToken, vn: Vn, group: GroupId) {
        self.endpoints.insert(id, EndpointPolicy { token, vn, group });
    }

    pub fn seed_rule(&mut self, rule: ConnectivityRule) {
        self.matrix
            .rules
            .insert((rule.vn, rule.src_group, rule.dst_group), rule.action);
    }

    pub fn matrix(&self) -> &ConnectivityMatrix {
        &self.matrix
    }

    pub fn endpoint_group(&self, id: EndpointId) -> Option<(Vn, GroupId)> {
        self.endpoints.get(&id).map(|e| (e.vn, e.group))
    }

    pub fn attachment(&self, id: EndpointId) -> Option<UnderlayAddr> {
        self.attachments.get(&id).copied()
    }

    /// Verify the endpoint's credential and hand back its segment
    /// assignment plus every rule whose destination is its group. The
    /// requesting edge is recorded as the endpoint's current location.
    pub fn authenticate(
        &mut self,
        id: EndpointId,
        token: AuthToken,
        edge: UnderlayAddr,
    ) -> AuthOutcome {
        let Some(policy) = self.endpoints.get(&id) else {
            return AuthOutcome::Denied;
        };
        if policy.token != token {
            return AuthOutcome::Denied;
        }
        let (vn, group) = (policy.vn, policy.group);
        self.attachments.insert(id, edge);
        AuthOutcome::Granted(AuthResult {
            endpoint_id: id,
            vn,
            group,
            rules: self.rules_for_destination_group(vn, group),
        })
    }

    /// Session stop: the endpoint left the given edge.
    pub fn session_stop(&mut self, id: EndpointId, edge: UnderlayAddr) {
        if self.attachments.get(&id) == Some(&edge) {
            self.attachments.remove(&id);
        }
    }

    /// Exactly the matrix rows with matching (vn, dst_group).
    pub fn rules_for_destination_group(&self, vn: Vn, dst: GroupId) -> Vec<ConnectivityRule> {
        self.matrix
            .rules
            .iter()
            .filter(|((rvn, _, rdst), _)| *rvn == vn && *rdst == dst)
            .map(|((rvn, src, rdst), action)| ConnectivityRule {
                vn: *rvn,
                src_group: *src,
                dst_group: *rdst,
                action: *action,
            })
            .collect()
    }

    fn edges_hosting_group(&self, vn: Vn, group: GroupId) -> BTreeSet<UnderlayAddr> {
        self.attachments
            .iter()
            .filter_map(|(id, edge)| {
                let p = self.endpoints.get(id)?;
                (p.vn == vn && p.group == group).then_some(*edge)
            })
            .collect()
    }

    /// Apply a matrix change. Every edge currently hosting at least one
    /// endpoint of the changed rule's destination group gets a fresh
    /// destination-filtered rule download; nobody else hears anything.
    pub fn update_matrix(
        &mut self,
        change: MatrixChange,
    ) -> (u64, BTreeSet<UnderlayAddr>, Vec<Outbound>) {
        let (vn, dst) = match change {
            MatrixChange::Upsert(rule) => {
                let slot = (rule.vn, rule.src_group, rule.dst_group);
                if self.matrix.rules.get(&slot) == Some(&rule.action) {
                    // Duplicate of an existing rule: nothing changed.
                    return (self.matrix.version, BTreeSet::new(), Vec::new());
                }
                self.matrix.rules.insert(slot, rule.action);
                (rule.vn, rule.dst_group)
            }
            MatrixChange::Remove { vn, src_group, dst_group } => {
                if self.matrix.rules.remove(&(vn, src_group, dst_group)).is_none() {
                    return (self.matrix.version, BTreeSet::new(), Vec::new());
                }
                (vn, dst_group)
            }
        };
        self.matrix.version += 1;
        let affected = self.edges_hosting_group(vn, dst);
        let rules = self.rules_for_destination_group(vn, dst);
        let out = affected
            .iter()
            .map(|edge| {
                Outbound::to_router(
                    *edge,
                    ControlMessage::RuleDownload { vn, dst_group: dst, rules: rules.clone() },
                )
            })
            .collect();
        (self.matrix.version, affected, out)
    }

    /// Move an endpoint to a different group. The endpoint's current edge
    /// is sent a refreshed authentication result, which re-runs the local
    /// part of onboarding there; signaling cost is the number of control
    /// messages emitted.
    pub fn reassign_group(
        &mut self,
        id: EndpointId,
        new_group: GroupId,
    ) -> Result<(usize, Vec<Outbound>), ReassignError> {
        let policy = self.endpoints.get_mut(&id).ok_or(ReassignError::UnknownEndpoint)?;
        if policy.group == new_group {
            return Ok((0, Vec::new()));
        }
        policy.group = new_group;
        let (vn, group) = (policy.vn, policy.group);
        let Some(edge) = self.attachments.get(&id).copied() else {
            // Endpoint not currently on the network; it will pick up the
            // new group at its next authentication.
            return Ok((0, Vec::new()));
        };
        let result = AuthResult {
            endpoint_id: id,
            vn,
            group,
            rules: self.rules_for_destination_group(vn, group),
        };
        let out = vec![Outbound::to_router(
            edge,
            ControlMessage::AuthReply(AuthReply {
                endpoint_id: id,
                outcome: AuthOutcome::Granted(result),
            }),
        )];
        Ok((out.len(), out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn ul(last: u8) -> UnderlayAddr {
        UnderlayAddr::new(Ipv4Addr::new(192, 0, 2, last))
    }

    fn vn(v: u32) -> Vn {
        Vn::new(v).unwrap()
    }

    fn rule(v: u32, src: u16, dst: u16, action: RuleAction) -> ConnectivityRule {
        ConnectivityRule {
            vn: vn(v),
            src_group: GroupId::new(src),
            dst_group: GroupId::new(dst),
            action,
        }
    }

    fn server_with_matrix() -> PolicyServer {
        let mut ps = PolicyServer::new(RuleAction::Deny);
        ps.seed_rule(rule(1, 10, 20, RuleAction::Allow));
        ps.seed_rule(rule(1, 30, 20, RuleAction::Deny));
        ps.seed_rule(rule(1, 20, 40, RuleAction::Allow));
        ps
    }

    #[test]
    fn auth_returns_destination_filtered_rules() {
        let mut ps = server_with_matrix();
        ps.add_endpoint(EndpointId(1), AuthToken(7), vn(1), GroupId::new(20));
        match ps.authenticate(EndpointId(1), AuthToken(7), ul(1)) {
            AuthOutcome::Granted(res) => {
                assert_eq!(res.group, GroupId::new(20));
                assert_eq!(
                    res.rules,
                    vec![rule(1, 10, 20, RuleAction::Allow), rule(1, 30, 20, RuleAction::Deny)]
                );
            }
            AuthOutcome::Denied => panic!("expected grant"),
        }
    }

    #[test]
    fn bad_token_denied() {
        let mut ps = server_with_matrix();
        ps.add_endpoint(EndpointId(1), AuthToken(7), vn(1), GroupId::new(20));
        assert_eq!(ps.authenticate(EndpointId(1), AuthToken(8), ul(1)), AuthOutcome::Denied);
        assert_eq!(ps.authenticate(EndpointId(2), AuthToken(7), ul(1)), AuthOutcome::Denied);
        assert_eq!(ps.attachment(EndpointId(1)), None);
    }

    #[test]
    fn empty_matrix_grants_with_no_rules() {
        let mut ps = PolicyServer::new(RuleAction::Deny);
        ps.add_endpoint(EndpointId(1), AuthToken(7), vn(1), GroupId::new(20));
        match ps.authenticate(EndpointId(1), AuthToken(7), ul(1)) {
            AuthOutcome::Granted(res) => assert!(res.rules.is_empty()),
            AuthOutcome::Denied => panic!("expected grant"),
        }
    }

    #[test]
    fn filter_matches_brute_force_on_random_matrices() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut ps = PolicyServer::new(RuleAction::Deny);
            let mut all = Vec::new();
            for _ in 0..rng.gen_range(0..40) {
                let r = rule(
                    rng.gen_range(1..3),
                    rng.gen_range(0..6) * 10,
                    rng.gen_range(0..6) * 10,
                    if rng.gen() { RuleAction::Allow } else { RuleAction::Deny },
                );
                ps.seed_rule(r);
                all.retain(|e: &ConnectivityRule| {
                    (e.vn, e.src_group, e.dst_group) != (r.vn, r.src_group, r.dst_group)
                });
                all.push(r);
            }
            let qvn = vn(rng.gen_range(1..3));
            let qdst = GroupId::new(rng.gen_range(0..6) * 10);
            let mut expect: Vec<_> =
                all.iter().filter(|r| r.vn == qvn && r.dst_group == qdst).copied().collect();
            expect.sort();
            let mut got = ps.rules_for_destination_group(qvn, qdst);
            got.sort();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn full_matrix_destination_column() {
        let mut ps = PolicyServer::new(RuleAction::Deny);
        for src in [1u16, 2, 3] {
            for dst in [1u16, 2, 3] {
                ps.seed_rule(rule(1, src * 10, dst * 10, RuleAction::Allow));
            }
        }
        assert_eq!(ps.rules_for_destination_group(vn(1), GroupId::new(20)).len(), 3);
    }

    #[test]
    fn cross_vn_rules_excluded() {
        let mut ps = PolicyServer::new(RuleAction::Deny);
        ps.seed_rule(rule(1, 10, 20, RuleAction::Allow));
        ps.seed_rule(rule(2, 10, 20, RuleAction::Allow));
        let got = ps.rules_for_destination_group(vn(1), GroupId::new(20));
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].vn, vn(1));
    }

    #[test]
    fn matrix_update_notifies_exactly_hosting_edges() {
        let mut ps = server_with_matrix();
        for (id, g, edge) in [(1u32, 20u16, 1u8), (2, 20, 3), (3, 40, 2)] {
            ps.add_endpoint(EndpointId(id), AuthToken(7), vn(1), GroupId::new(g));
            ps.authenticate(EndpointId(id), AuthToken(7), ul(edge));
        }
        let (_, affected, out) =
            ps.update_matrix(MatrixChange::Upsert(rule(1, 10, 20, RuleAction::Deny)));
        assert_eq!(affected, BTreeSet::from([ul(1), ul(3)]));
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn rule_for_unattached_group_touches_nobody() {
        let mut ps = server_with_matrix();
        let (_, affected, out) =
            ps.update_matrix(MatrixChange::Upsert(rule(1, 10, 99, RuleAction::Allow)));
        assert!(affected.is_empty());
        assert!(out.is_empty());
    }

    #[test]
    fn duplicate_rule_and_absent_removal_are_noops() {
        let mut ps = server_with_matrix();
        let v0 = ps.matrix().version();
        let (v, affected, _) =
            ps.update_matrix(MatrixChange::Upsert(rule(1, 10, 20, RuleAction::Allow)));
        assert_eq!(v, v0);
        assert!(affected.is_empty());
        let (v, _, _) = ps.update_matrix(MatrixChange::Remove {
            vn: vn(1),
            src_group: GroupId::new(77),
            dst_group: GroupId::new(88),
        });
        assert_eq!(v, v0);
    }

    #[test]
    fn reassign_touches_exactly_one_edge() {
        let mut ps = server_with_matrix();
        ps.add_endpoint(EndpointId(1), AuthToken(7), vn(1), GroupId::new(20));
        ps.authenticate(EndpointId(1), AuthToken(7), ul(5));
        let (count, out) = ps.reassign_group(EndpointId(1), GroupId::new(40)).unwrap();
        assert_eq!(count, 1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].to, crate::model::ControlDest::Router(ul(5)));
        match &out[0].msg {
            ControlMessage::AuthReply(AuthReply {
                outcome: AuthOutcome::Granted(res), ..
            }) => {
                assert_eq!(res.group, GroupId::new(40));
                assert!(res.rules.iter().all(|r| r.dst_group == GroupId::new(40)));
            }
            other => panic!("expected refreshed auth, got {other:?}"),
        }
    }

    #[test]
    fn reassign_to_current_group_is_noop() {
        let mut ps = server_with_matrix();
        ps.add_endpoint(EndpointId(1), AuthToken(7), vn(1), GroupId::new(20));
        ps.authenticate(EndpointId(1), AuthToken(7), ul(5));
        let (count, out) = ps.reassign_group(EndpointId(1), GroupId::new(20)).unwrap();
        assert_eq!(count, 0);
        assert!(out.is_empty());
    }

    #[test]
    fn reassign_unknown_endpoint_errors() {
        let mut ps = server_with_matrix();
        assert_eq!(
            ps.reassign_group(EndpointId(9), GroupId::new(1)),
            Err(ReassignError::UnknownEndpoint)
        );
    }

    #[test]
    fn matrix_update_vs_reassignment_signaling_counts() {
        // A rule change touching k edges costs k messages; moving m
        // endpoints that all sit on one edge costs m messages.
        let mut ps = server_with_matrix();
        let k_edges = 4u8;
        for i in 0..k_edges {
            ps.add_endpoint(EndpointId(100 + i as u32), AuthToken(7), vn(1), GroupId::new(20));
            ps.authenticate(EndpointId(100 + i as u32), AuthToken(7), ul(10 + i));
        }
        let (_, _, downloads) =
            ps.update_matrix(MatrixChange::Upsert(rule(1, 10, 20, RuleAction::Deny)));
        assert_eq!(downloads.len(), k_edges as usize);

        let m = 3u32;
        for i in 0..m {
            ps.add_endpoint(EndpointId(200 + i), AuthToken(7), vn(1), GroupId::new(50));
            ps.authenticate(EndpointId(200 + i), AuthToken(7), ul(42));
        }
        let mut total = 0;
        for i in 0..m {
            let (c, _) = ps.reassign_group(EndpointId(200 + i), GroupId::new(60)).unwrap();
            total += c;
        }
        assert_eq!(total, m as usize);
    }

    #[test]
    fn session_stop_clears_attachment() {
        let mut ps = server_with_matrix();
        ps.add_endpoint(EndpointId(1), AuthToken(7), vn(1), GroupId::new(20));
        ps.authenticate(EndpointId(1), AuthToken(7), ul(1));
        ps.session_stop(EndpointId(1), ul(1));
        let (_, affected, _) =
            ps.update_matrix(MatrixChange::Upsert(rule(1, 10, 20, RuleAction::Deny)));
        assert!(affected.is_empty());
    }
}
