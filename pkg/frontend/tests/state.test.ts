import { describe, expect, it } from 'vitest';

import type { Dashboard, InstanceView, PatientEntities } from '../src/api.js';
import { widgetFor } from '../src/form.js';
import { buildEntityTree, dashboardView, displayedAttributes, formatRate } from '../src/state.js';

function instance(overrides: Partial<InstanceView>): InstanceView {
  return {
    instance_id: 'i1',
    entity_type: 'Biomarker',
    attributes: { biomarker_tested: 'BRAF' },
    provenance: [],
    decision: null,
    edited_attributes: null,
    reviewer_added: false,
    ...overrides,
  };
}

describe('buildEntityTree', () => {
  const payload: PatientEntities = {
    patient_id: 'p1',
    entities: {
      Medication: {
        schema: [],
        instances: [
          instance({ instance_id: 'm1', entity_type: 'Medication', decision: 'approve' }),
          instance({ instance_id: 'm2', entity_type: 'Medication' }),
        ],
      },
      Biomarker: {
        schema: [],
        instances: [instance({ instance_id: 'b1', decision: 'edit' })],
      },
    },
  };

  it('sorts groups and counts decided instances', () => {
    const tree = buildEntityTree(payload);
    expect(tree.map((n) => n.entityType)).toEqual(['Biomarker', 'Medication']);
    const medication = tree[1];
    expect(medication.total).toBe(2);
    expect(medication.decided).toBe(1);
    expect(medication.complete).toBe(false);
  });

  it('marks a group complete only when every instance is decided', () => {
    const tree = buildEntityTree(payload);
    expect(tree[0].complete).toBe(true);
  });
});

describe('dashboardView', () => {
  it('formats server rates to three decimals without rederiving them', () => {
    const dashboard: Dashboard = {
      approved_rate: 0.941176,
      edit_rate: 0.0171,
      missing_rate: 0.042,
      acceptance_over_extracted: 0.9822,
      edit_over_extracted: 0.0178,
      n_correct: 941,
      n_incorrect: 17,
      n_missing: 42,
      per_entity: {},
    };
    const view = dashboardView(dashboard);
    expect(view.approved).toBe('0.941');
    expect(view.edited).toBe('0.017');
    expect(view.missing).toBe('0.042');
  });

  it('renders undefined rates as n/a', () => {
    expect(formatRate(null)).toBe('n/a');
  });
});

describe('displayedAttributes', () => {
  it('overlays reviewer edits on the extraction', () => {
    const inst = instance({
      attributes: { biomarker_tested: 'BRAF', interpretation: 'Positive' },
      edited_attributes: { interpretation: 'Negative' },
    });
    expect(displayedAttributes(inst)).toEqual({
      biomarker_tested: 'BRAF',
      interpretation: 'Negative',
    });
  });
});

describe('widgetFor', () => {
  it('picks type-appropriate controls', () => {
    expect(widgetFor({ name: 'd', kind: 'Date', values: null, required: false }))
      .toEqual({ control: 'date' });
    expect(widgetFor({ name: 'c', kind: 'Categorical', values: ['A'], required: false }))
      .toEqual({ control: 'select', options: ['A'] });
    expect(widgetFor({ name: 'b', kind: 'Boolean', values: null, required: false }))
      .toEqual({ control: 'checkbox' });
    expect(widgetFor({ name: 'n', kind: 'Integer', values: null, required: false }))
      .toEqual({ control: 'number', step: '1' });
  });
});
