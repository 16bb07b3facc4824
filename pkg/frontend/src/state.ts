// View-model helpers: entity tree with counts and completion, dashboard
// formatting. Rates are always the server's numbers, only formatted here.

import type { Dashboard, InstanceView, PatientEntities } from './api.js';

export interface EntityNode {
  entityType: string;
  instances: InstanceView[];
  total: number;
  decided: number;
  complete: boolean; // every instance has a terminal decision
}

export function buildEntityTree(payload: PatientEntities): EntityNode[] {
  return Object.keys(payload.entities)
    .sort()
    .map((entityType) => {
      const group = payload.entities[entityType];
      const decided = group.instances.filter((inst) => inst.decision !== null).length;
      return {
        entityType,
        instances: group.instances,
        total: group.instances.length,
        decided,
        complete: group.instances.length > 0 && decided === group.instances.length,
      };
    });
}

export function formatRate(rate: number | null): string {
  if (rate === null || Number.isNaN(rate)) return 'n/a';
  return rate.toFixed(3);
}

export interface DashboardView {
  approved: string;
  edited: string;
  missing: string;
  counts: { correct: number; incorrect: number; missing: number };
  perEntity: { entityType: string; approved: string; edited: string; missing: string }[];
}

export function dashboardView(dashboard: Dashboard): DashboardView {
  return {
    approved: formatRate(dashboard.approved_rate),
    edited: formatRate(dashboard.edit_rate),
    missing: formatRate(dashboard.missing_rate),
    counts: {
      correct: dashboard.n_correct,
      incorrect: dashboard.n_incorrect,
      missing: dashboard.n_missing,
    },
    perEntity: Object.keys(dashboard.per_entity ?? {})
      .sort()
      .map((entityType) => ({
        entityType,
        approved: formatRate(dashboard.per_entity[entityType].approved_rate),
        edited: formatRate(dashboard.per_entity[entityType].edit_rate),
        missing: formatRate(dashboard.per_entity[entityType].missing_rate),
      })),
  };
}

export function displayedAttributes(inst: InstanceView): Record<string, unknown> {
  // Edits are rendered on top of the original extraction.
  return { ...inst.attributes, ...(inst.edited_attributes ?? {}) };
}
